"""branchsim: trace-driven serving simulator for prediction-guided
multi-branch reasoning policies."""

from .core import (NO_ANSWER, Duration, TimePoint, VoteTally, majority_vote,
                   normalize_answer, percentile)
from .orchestrator import (BranchAction, BranchState, OrchestratorConfig,
                           RequestOutcome, RoundReport, TERMINATION_DISABLED,
                           branch_out_sample, branch_out_weights,
                           check_early_termination, check_request_termination,
                           make_request_run, run_default_sc, run_duchess,
                           run_dynasor, run_short_mk)
from .predictor import (DEFAULT_CONFUSION, MlpWeights, SyntheticPredictorConfig,
                        calibrate_tau, load_activations, load_weights,
                        mlp_forward, predict_difficulty, save_weights,
                        synthetic_predict)
from .scheduler import (ArrivalConfig, QueueEntry, SCHEDULES, gen_arrivals,
                        next_request)
from .simengine import (MetricsReport, RequestLogEntry, TimingModel,
                        compare_reports, round_time, run_simulation,
                        write_results_csv, write_summary_json)
from .workload import (BranchTemplate, RequestTrace, SyntheticParams, Workload,
                       generate_synthetic, load_trace, probe_answer, save_trace,
                       validate_trace)

__version__ = "0.1.0"
