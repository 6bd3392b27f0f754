"""Per-request policy state machines.

Each policy advances one request in rounds of up to ``interval_tokens`` new
tokens per branch. A round reports what happened (tokens decoded, probes
charged, branch actions) so the engine can price it; the policies themselves
never touch the clock, which keeps them exactly replayable.

Policies:

* ``duchess``     - prediction-guided orchestration: early termination when a
                    branch's predicted correctness stays above a threshold,
                    branch-out forks into freed slots, and request-level
                    consensus/coverage termination.
* ``default-sc``  - plain self-consistency: every branch decodes to natural
                    end (or the cap), vote over all finals.
* ``short-mk``    - request ends the instant the m-th of k branches finishes;
                    vote over exactly those m answers.
* ``dynasor``     - per-branch probing every round; a branch stops once its
                    last D probed answers agree.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field

from .core import VoteTally, majority_vote
from .predictor import SyntheticPredictorConfig, synthetic_predict
from .workload import BranchTemplate, RequestTrace, probe_answer, trace_prediction

logger = logging.getLogger(__name__)

# Branch lifecycle.
ACTIVE = "active"
EARLY_TERMINATED = "early_terminated"
NATURAL_END = "natural_end"
CAPPED = "capped"
CANCELLED = "cancelled"

# Request termination reasons.
CONSENSUS = "consensus"
COVERAGE = "coverage"
EXHAUSTED = "exhausted"

# Policy names (the CLI's --policy values).
POLICY_DUCHESS = "duchess"
POLICY_DEFAULT_SC = "default-sc"
POLICY_SHORT_MK = "short-mk"
POLICY_DYNASOR = "dynasor"
POLICIES = (POLICY_DUCHESS, POLICY_DEFAULT_SC, POLICY_SHORT_MK, POLICY_DYNASOR)

# Predictions are clamped away from zero before the 1/temperature exponent;
# p=0 would otherwise degenerate for small temperatures.
BRANCH_PROB_FLOOR = 1e-6

# A threshold no prediction can exceed, i.e. early termination disabled.
TERMINATION_DISABLED = math.inf


@dataclass(frozen=True)
class OrchestratorConfig:
    """All intra-request policy knobs."""

    max_branches: int = 10          # parallel branch slots per request
    interval_tokens: int = 16       # tokens decoded between prediction rounds
    early_term_threshold: float = 0.7
    early_term_rounds: int = 2      # consecutive rounds above the threshold
    branch_out_temperature: float = 1.0
    consensus_frac: float = 0.6     # identical answers to stop, fraction of slots
    coverage_frac: float = 0.8      # total answers to stop, fraction of slots
    token_cap: int = 4096
    probe_cost_tokens: int = 10
    dynasor_window: int = 3         # consecutive consistent probes (dynasor)
    short_m: int = 5                # finishers that end the request (short-mk)

    def __post_init__(self) -> None:
        if self.max_branches < 1:
            raise ValueError("max_branches must be >= 1")
        if self.interval_tokens < 1:
            raise ValueError("interval_tokens must be >= 1")
        if self.early_term_rounds < 1:
            raise ValueError("early_term_rounds must be >= 1")
        if self.branch_out_temperature <= 0:
            raise ValueError("branch_out_temperature must be > 0")
        # consensus_frac == coverage_frac == 1 is allowed: it turns the policy
        # into plain self-consistency (the policy-reduction identity).
        if not 0.0 < self.consensus_frac <= 1.0:
            raise ValueError("consensus_frac must be in (0, 1]")
        if not self.consensus_frac <= self.coverage_frac <= 1.0:
            raise ValueError("coverage_frac must be in [consensus_frac, 1]")
        if self.token_cap < self.interval_tokens:
            raise ValueError("token_cap must be >= interval_tokens")
        if self.probe_cost_tokens < 0:
            raise ValueError("probe_cost_tokens must be >= 0")


@dataclass
class BranchState:
    """One reasoning branch riding a workload template.

    ``offset_base`` is the prefix inherited from the parent at fork time (0
    for initial branches); the branch's position inside its template is
    ``offset_base + tokens_decoded``. Only self-decoded tokens are charged:
    the inherited prefix reuses the parent's progress.
    """

    branch_id: int
    template_index: int
    template: BranchTemplate
    offset_base: int = 0
    tokens_decoded: int = 0
    prediction_history: list[float] = field(default_factory=list)
    probe_history: list[tuple[int, str]] = field(default_factory=list)
    streak: int = 0
    status: str = ACTIVE
    final_answer: str | None = None
    # Most recent correctness estimate, inherited from the fork source until
    # the branch earns its own; used only for branch-out weighting.
    last_prediction: float = 0.5

    @property
    def position(self) -> int:
        return self.offset_base + self.tokens_decoded


@dataclass(frozen=True)
class BranchAction:
    kind: str  # "continue" | "terminate" | "branch_out"
    branch_id: int
    source_branch_id: int | None = None


@dataclass
class RequestOutcome:
    tally: VoteTally
    final: str
    termination_reason: str
    tokens_decode: int
    tokens_probe: int
    rounds: int

    @property
    def tokens_total(self) -> int:
        return self.tokens_decode + self.tokens_probe


@dataclass
class RoundReport:
    """What one round did, for the engine to price."""

    round_index: int
    decoding_branches: int  # branches that decoded at least one token
    max_chunk: int          # largest per-branch decode chunk this round
    decode_tokens: int      # total decode tokens across branches
    probes: int             # probe events charged this round
    actions: list[BranchAction]
    done: bool


def _at_least(frac: float, slots: int) -> int:
    """Smallest integer count satisfying 'at least frac * slots'."""
    return math.ceil(frac * slots - 1e-9)


def check_early_termination(branch: BranchState, threshold: float,
                            rounds: int) -> bool:
    """True iff the branch's last ``rounds`` predictions all strictly exceed
    the threshold."""
    history = branch.prediction_history
    if len(history) < rounds:
        return False
    return all(p > threshold for p in history[-rounds:])


def branch_out_weights(probs, temperature: float) -> list[float]:
    """Rescaled branch-out distribution: each probability is raised to
    1/temperature and renormalized. Sums to 1 within 1e-9."""
    if len(probs) == 0:
        raise ValueError("no branch to duplicate")
    exponent = 1.0 / temperature
    raw = [min(max(p, BRANCH_PROB_FLOOR), 1.0) ** exponent for p in probs]
    total = sum(raw)
    return [w / total for w in raw]


def branch_out_sample(probs, temperature: float, rng: random.Random) -> int:
    """Pick the branch to duplicate by sampling the rescaled distribution."""
    weights = branch_out_weights(probs, temperature)
    u = rng.random()
    acc = 0.0
    for idx, w in enumerate(weights):
        acc += w
        if u < acc:
            return idx
    return len(weights) - 1


def check_request_termination(tally: VoteTally, consensus_frac: float,
                              coverage_frac: float, max_branches: int) -> str | None:
    """Consensus wins when enough identical answers are in; coverage when
    enough answers total. Consensus is checked first."""
    if tally.max_count() >= _at_least(consensus_frac, max_branches):
        return CONSENSUS
    if tally.total >= _at_least(coverage_frac, max_branches):
        return COVERAGE
    return None


def make_correctness_predictor(trace: RequestTrace,
                               synthetic: SyntheticPredictorConfig):
    """Per-branch correctness source for one request: trace-embedded
    predictions when the template carries them, otherwise the synthetic
    oracle blended with noise."""

    def predict(template: BranchTemplate, position: int,
                rng: random.Random) -> float:
        if template.pred_probs:
            return trace_prediction(template, position)
        converged = probe_answer(template, position) == trace.ground_truth
        return synthetic_predict(converged, synthetic, rng)

    return predict


class RequestRun:
    """Base round-granularity state machine for one request."""

    def __init__(self, trace: RequestTrace, config: OrchestratorConfig,
                 rng: random.Random | None = None) -> None:
        self.trace = trace
        self.config = config
        self.rng = rng
        self.tally = VoteTally()
        self.branches: list[BranchState] = []
        self.tokens_decode = 0
        self.tokens_probe = 0
        self.rounds = 0
        self.outcome: RequestOutcome | None = None
        self._next_template = 0
        seeded = min(config.max_branches, len(trace.templates))
        if seeded < config.max_branches:
            logger.warning("request %s: only %d templates for %d branch slots, "
                           "parallelism degraded", trace.id, len(trace.templates),
                           config.max_branches)
        for _ in range(seeded):
            self._spawn(offset_base=0)

    @property
    def done(self) -> bool:
        return self.outcome is not None

    def _spawn(self, offset_base: int,
               source: BranchState | None = None) -> BranchState | None:
        if self._next_template >= len(self.trace.templates):
            return None
        template = self.trace.templates[self._next_template]
        branch = BranchState(
            branch_id=len(self.branches),
            template_index=self._next_template,
            template=template,
            offset_base=min(offset_base, template.natural_length),
            last_prediction=source.last_prediction if source else 0.5,
        )
        self._next_template += 1
        self.branches.append(branch)
        return branch

    def _active(self) -> list[BranchState]:
        return [b for b in self.branches if b.status == ACTIVE]

    def _decode_chunk(self, branch: BranchState) -> int:
        room = min(branch.template.natural_length,
                   self.config.token_cap) - branch.position
        chunk = max(0, min(self.config.interval_tokens, room))
        branch.tokens_decoded += chunk
        self.tokens_decode += chunk
        return chunk

    def _probe(self, branch: BranchState) -> str:
        answer = probe_answer(branch.template, branch.position)
        branch.probe_history.append((branch.position, answer))
        self.tokens_probe += self.config.probe_cost_tokens
        return answer

    def _collect(self, branch: BranchState, status: str, answer: str) -> None:
        branch.status = status
        branch.final_answer = answer
        self.tally.add(answer)

    def _cancel_active(self) -> None:
        for branch in self._active():
            branch.status = CANCELLED

    def _finish(self, reason: str) -> None:
        self.outcome = RequestOutcome(
            tally=self.tally,
            final=majority_vote(self.tally),
            termination_reason=reason,
            tokens_decode=self.tokens_decode,
            tokens_probe=self.tokens_probe,
            rounds=self.rounds,
        )

    def step(self) -> RoundReport:
        raise NotImplementedError

    def run(self) -> RequestOutcome:
        while not self.done:
            self.step()
        assert self.outcome is not None
        return self.outcome


class DuchessRun(RequestRun):
    """Prediction-guided orchestration."""

    def __init__(self, trace: RequestTrace, config: OrchestratorConfig,
                 rng: random.Random,
                 synthetic: SyntheticPredictorConfig | None = None,
                 predictor=None) -> None:
        super().__init__(trace, config, rng)
        if predictor is None:
            predictor = make_correctness_predictor(
                trace, synthetic or SyntheticPredictorConfig())
        self._predict = predictor

    def step(self) -> RoundReport:
        if self.done:
            raise RuntimeError("request already terminated")
        assert self.rng is not None
        cfg = self.config
        self.rounds += 1
        actions: list[BranchAction] = []
        probes = 0
        decoding = 0
        max_chunk = 0
        decode_tokens = 0

        # 1. Decode up to one interval per active branch; branches reaching
        # their natural end keep the template's final answer without probing,
        # branches hitting the cap are probed for one.
        for branch in self._active():
            chunk = self._decode_chunk(branch)
            if chunk > 0:
                decoding += 1
                max_chunk = max(max_chunk, chunk)
                decode_tokens += chunk
            if branch.position >= branch.template.natural_length:
                self._collect(branch, NATURAL_END, branch.template.final_answer)
            elif branch.position >= cfg.token_cap:
                answer = self._probe(branch)
                probes += 1
                self._collect(branch, CAPPED, answer)

        # 2. Predictions for branches still running.
        survivors = self._active()
        for branch in survivors:
            p = self._predict(branch.template, branch.position, self.rng)
            branch.prediction_history.append(p)
            branch.last_prediction = p
            branch.streak = branch.streak + 1 if p > cfg.early_term_threshold else 0

        # 3. Early termination: threshold held for enough consecutive rounds.
        for branch in survivors:
            if branch.streak >= cfg.early_term_rounds:
                answer = self._probe(branch)
                probes += 1
                self._collect(branch, EARLY_TERMINATED, answer)
                actions.append(BranchAction("terminate", branch.branch_id))
            else:
                actions.append(BranchAction("continue", branch.branch_id))

        # 4. Refill freed slots by forking, while spare templates remain. The
        # child resumes the consumed template at the parent's position and
        # starts with a clean prediction history.
        alive = self._active()
        while (alive and len(alive) < cfg.max_branches
               and self._next_template < len(self.trace.templates)):
            idx = branch_out_sample([b.last_prediction for b in alive],
                                    cfg.branch_out_temperature, self.rng)
            source = alive[idx]
            child = self._spawn(offset_base=source.position, source=source)
            assert child is not None
            actions.append(BranchAction("branch_out", child.branch_id,
                                        source_branch_id=source.branch_id))
            alive.append(child)

        # 5. Request-level termination on the updated tally; leftover active
        # branches are cancelled uncounted.
        reason = check_request_termination(self.tally, cfg.consensus_frac,
                                           cfg.coverage_frac, cfg.max_branches)
        if reason is not None:
            self._cancel_active()
            self._finish(reason)
        elif not self._active():
            # Nothing left to run or fork from: settle for what was collected.
            self._finish(EXHAUSTED)

        return RoundReport(self.rounds, decoding, max_chunk, decode_tokens,
                           probes, actions, self.done)


class DefaultScRun(RequestRun):
    """Plain self-consistency: all branches decode to the end, no early exits."""

    def step(self) -> RoundReport:
        if self.done:
            raise RuntimeError("request already terminated")
        cfg = self.config
        self.rounds += 1
        actions: list[BranchAction] = []
        probes = 0
        decoding = 0
        max_chunk = 0
        decode_tokens = 0
        for branch in self._active():
            chunk = self._decode_chunk(branch)
            if chunk > 0:
                decoding += 1
                max_chunk = max(max_chunk, chunk)
                decode_tokens += chunk
            if branch.position >= branch.template.natural_length:
                self._collect(branch, NATURAL_END, branch.template.final_answer)
            elif branch.position >= cfg.token_cap:
                answer = self._probe(branch)
                probes += 1
                self._collect(branch, CAPPED, answer)
            else:
                actions.append(BranchAction("continue", branch.branch_id))
        if not self._active():
            self._finish(EXHAUSTED)
        return RoundReport(self.rounds, decoding, max_chunk, decode_tokens,
                           probes, actions, self.done)


class ShortMkRun(RequestRun):
    """Terminate the whole request the instant the m-th branch finishes.

    Branches decode in lockstep, so when the m-th finisher completes
    mid-round, every unfinished branch has decoded exactly as many tokens as
    that finisher did this round; those tokens are counted, the branches are
    cancelled, and the vote covers exactly the first m answers.
    """

    def __init__(self, trace: RequestTrace, config: OrchestratorConfig,
                 rng: random.Random | None = None) -> None:
        if config.short_m > config.max_branches:
            raise ValueError(
                f"short_m ({config.short_m}) must not exceed max_branches "
                f"({config.max_branches})")
        super().__init__(trace, config, rng)
        self._finished = 0
        self._target_m = min(config.short_m, len(self.branches))

    def _finish_branch(self, branch: BranchState) -> int:
        """Collect a finisher's answer; returns probes charged."""
        if branch.position >= branch.template.natural_length:
            self._collect(branch, NATURAL_END, branch.template.final_answer)
            return 0
        answer = self._probe(branch)
        self._collect(branch, CAPPED, answer)
        return 1

    def step(self) -> RoundReport:
        if self.done:
            raise RuntimeError("request already terminated")
        cfg = self.config
        self.rounds += 1
        probes = 0
        active = self._active()
        plans: list[tuple[BranchState, int, bool]] = []
        for branch in active:
            room = min(branch.template.natural_length, cfg.token_cap) - branch.position
            chunk = min(cfg.interval_tokens, room)
            finishes = chunk == room
            plans.append((branch, chunk, finishes))

        finishers = sorted(((chunk, branch.branch_id, branch)
                            for branch, chunk, fin in plans if fin))
        cut_chunk: int | None = None
        if self._finished + len(finishers) >= self._target_m:
            cut_chunk = finishers[self._target_m - self._finished - 1][0]

        decoding = 0
        max_chunk = 0
        decode_tokens = 0
        counted = self._finished
        for branch, chunk, finishes in plans:
            take = chunk if cut_chunk is None else min(chunk, cut_chunk)
            branch.tokens_decoded += take
            self.tokens_decode += take
            if take > 0:
                decoding += 1
                max_chunk = max(max_chunk, take)
                decode_tokens += take
        if cut_chunk is None:
            for branch, _chunk, finishes in plans:
                if finishes:
                    probes += self._finish_branch(branch)
                    self._finished += 1
        else:
            # Exactly the first m finishers count; everything else stops at
            # the cut instant.
            for chunk, _bid, branch in finishers:
                if counted < self._target_m and chunk <= cut_chunk:
                    probes += self._finish_branch(branch)
                    counted += 1
            self._finished = counted
            self._cancel_active()
            self._finish(EXHAUSTED)
        if not self.done and not self._active():
            self._finish(EXHAUSTED)
        return RoundReport(self.rounds, decoding, max_chunk, decode_tokens,
                           probes, [], self.done)


class DynasorRun(RequestRun):
    """Consistency-probing baseline: every branch is probed each round and
    stops once its last ``dynasor_window`` probed answers agree."""

    def __init__(self, trace: RequestTrace, config: OrchestratorConfig,
                 rng: random.Random | None = None) -> None:
        if config.dynasor_window < 2:
            raise ValueError("dynasor_window must be >= 2")
        super().__init__(trace, config, rng)

    def step(self) -> RoundReport:
        if self.done:
            raise RuntimeError("request already terminated")
        cfg = self.config
        self.rounds += 1
        probes = 0
        decoding = 0
        max_chunk = 0
        decode_tokens = 0
        window = cfg.dynasor_window
        for branch in self._active():
            chunk = self._decode_chunk(branch)
            if chunk > 0:
                decoding += 1
                max_chunk = max(max_chunk, chunk)
                decode_tokens += chunk
            if branch.position >= branch.template.natural_length:
                self._collect(branch, NATURAL_END, branch.template.final_answer)
                continue
            if branch.position >= cfg.token_cap:
                answer = self._probe(branch)
                probes += 1
                self._collect(branch, CAPPED, answer)
                continue
            answer = self._probe(branch)
            probes += 1
            recent = [a for _at, a in branch.probe_history[-window:]]
            if len(recent) == window and len(set(recent)) == 1:
                self._collect(branch, EARLY_TERMINATED, answer)
        if not self._active():
            self._finish(EXHAUSTED)
        return RoundReport(self.rounds, decoding, max_chunk, decode_tokens,
                           probes, [], self.done)


def make_request_run(policy: str, trace: RequestTrace, config: OrchestratorConfig,
                     rng: random.Random | None = None,
                     synthetic: SyntheticPredictorConfig | None = None) -> RequestRun:
    if policy == POLICY_DUCHESS:
        if rng is None:
            raise ValueError("the duchess policy needs an rng")
        return DuchessRun(trace, config, rng, synthetic=synthetic)
    if policy == POLICY_DEFAULT_SC:
        return DefaultScRun(trace, config)
    if policy == POLICY_SHORT_MK:
        return ShortMkRun(trace, config)
    if policy == POLICY_DYNASOR:
        return DynasorRun(trace, config)
    raise ValueError(f"unknown policy {policy!r}")


def run_duchess(trace: RequestTrace, config: OrchestratorConfig,
                rng: random.Random,
                synthetic: SyntheticPredictorConfig | None = None) -> RequestOutcome:
    return DuchessRun(trace, config, rng, synthetic=synthetic).run()


def run_default_sc(trace: RequestTrace, config: OrchestratorConfig) -> RequestOutcome:
    return DefaultScRun(trace, config).run()


def run_short_mk(trace: RequestTrace, config: OrchestratorConfig) -> RequestOutcome:
    return ShortMkRun(trace, config).run()


def run_dynasor(trace: RequestTrace, config: OrchestratorConfig) -> RequestOutcome:
    return DynasorRun(trace, config).run()
