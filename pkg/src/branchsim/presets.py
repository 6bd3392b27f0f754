"""Named experiment presets.

Each preset bundles the orchestration knobs and a synthetic workload profile
styled after one benchmark regime: short chains with frequent prediction
rounds (gsm8k-like), longer chains with sparse rounds and full coverage
(mmlu-like), and long difficulty-graded chains (math-like). Explicit CLI
flags always override preset values.

The math-like length medians are calibrated (one brute-force sweep of the
per-token cost, then pinned) so that plain self-consistency with 10 branches
under the default timing model averages roughly 13.8, 18.4, 25.8, 33.6, and
47.4 seconds of service for difficulty levels 1-5.
"""

from __future__ import annotations

from dataclasses import dataclass

from .orchestrator import OrchestratorConfig
from .workload import SyntheticParams


@dataclass(frozen=True)
class ExperimentPreset:
    orchestrator: OrchestratorConfig
    synthetic: SyntheticParams
    qpm: float


PRESETS: dict[str, ExperimentPreset] = {
    "gsm8k-like": ExperimentPreset(
        orchestrator=OrchestratorConfig(
            max_branches=10, interval_tokens=16, early_term_threshold=0.70,
            early_term_rounds=2, branch_out_temperature=1.0,
            consensus_frac=0.6, coverage_frac=0.8),
        synthetic=SyntheticParams(
            level_median_tokens=(180, 220, 260, 300, 350),
            level_correct_prob=(0.92, 0.88, 0.84, 0.80, 0.75),
            templates_per_request=12,
            probe_stride=16),
        qpm=2.0,
    ),
    "mmlu-like": ExperimentPreset(
        orchestrator=OrchestratorConfig(
            max_branches=10, interval_tokens=80, early_term_threshold=0.80,
            early_term_rounds=2, branch_out_temperature=0.8,
            consensus_frac=0.4, coverage_frac=1.0),
        synthetic=SyntheticParams(
            level_median_tokens=(300, 380, 480, 580, 700),
            level_correct_prob=(0.82, 0.76, 0.70, 0.64, 0.58),
            templates_per_request=12,
            probe_stride=40),
        qpm=2.0,
    ),
    "math-like": ExperimentPreset(
        orchestrator=OrchestratorConfig(
            max_branches=10, interval_tokens=80, early_term_threshold=0.80,
            early_term_rounds=2, branch_out_temperature=0.8,
            consensus_frac=0.6, coverage_frac=0.8),
        synthetic=SyntheticParams(
            level_median_tokens=(340, 460, 640, 840, 1180),
            level_correct_prob=(0.85, 0.78, 0.70, 0.62, 0.52),
            templates_per_request=12,
            distractor_count=10,
            probe_stride=40),
        qpm=1.0,
    ),
}
