import pytest

from multibackmap.bench import (
    ExperimentFailure,
    ExperimentSpec,
    check_outcomes,
    compact_spec,
    flexible_spec,
    relative_gain,
    run_all,
    run_experiment,
)
from multibackmap.cvae import StepHyperparams
from multibackmap.metrics import MetricsReport
from multibackmap.pipeline import StepConfig
from multibackmap.train import TrainConfig

HP = StepHyperparams(n_features=8, latent_dim=3, cg_cutoff=12.0, fg_cutoff=3.0, dec_depth=1)


def _tiny(name="tiny", expected=("rmsd_lower",), flexibility=10.0):
    tc = TrainConfig(epochs=2, batch_size=4, learning_rate=5e-3)
    return ExperimentSpec(
        name=name,
        ladder=("calpha", "segments:3"),
        steps=(StepConfig(HP, tc), StepConfig(HP, tc)),
        one_step=StepConfig(HP, tc.with_(batch_size=2, accumulation_steps=2)),
        n_residues=8,
        n_frames=20,
        flexibility=flexibility,
        seeds=(0, 1),
        expected=expected,
    )


def _report(rmsd, ged, clash):
    return MetricsReport(rmsd, 0.0, ged, 0.0, clash, 0.0, 3)


def test_relative_gain():
    assert relative_gain(2.0, 1.5) == pytest.approx(0.25)
    assert relative_gain(0.0, 0.0) == 0.0


def test_check_outcomes():
    multi, single = _report(1.30, 0.02, 0.0), _report(1.40, 0.20, 1.0)
    names = ("rmsd_lower", "ged_lower", "ged_5x_lower", "clash_lower", "ged_gain_exceeds_rmsd_gain", "clash_gain_exceeds_rmsd_gain")
    assert check_outcomes(multi, single, names) == []
    assert check_outcomes(_report(1.5, 0.3, 2.0), single, names) == list(names)
    assert check_outcomes(_report(1.3, 0.05, 0.0), single, ["ged_5x_lower"]) == ["ged_5x_lower"]


def test_spec_validation():
    tc = TrainConfig(epochs=2, batch_size=4)
    with pytest.raises(ValueError, match="effective batch"):
        ExperimentSpec("x", ("calpha",), (StepConfig(HP, tc),), StepConfig(HP, tc.with_(batch_size=2)))
    with pytest.raises(ValueError, match="unknown outcome"):
        ExperimentSpec("x", ("calpha",), (StepConfig(HP, tc),), StepConfig(HP, tc), expected=("faster",))
    with pytest.raises(ValueError, match="step configs"):
        ExperimentSpec("x", ("calpha", "segments:2"), (StepConfig(HP, tc),), StepConfig(HP, tc))


def test_bundled_specs_match_budgets():
    for spec in (compact_spec(), flexible_spec()):
        assert spec.n_residues == 48 and spec.n_frames == 500 and len(spec.seeds) == 3
        assert spec.ladder == ("calpha", "segments:8")
    assert flexible_spec().flexibility > compact_spec().flexibility


def test_run_experiment_outputs_deterministic(tmp_path):
    a = run_experiment(_tiny(), tmp_path / "a", check=False)
    b = run_experiment(_tiny(), tmp_path / "b", check=False)
    for name in ("summary.md", "metrics.csv"):
        assert (tmp_path / "a" / "tiny" / name).read_bytes() == (tmp_path / "b" / "tiny" / name).read_bytes()
    assert "| Scheme | RMSD (Å) | GED λ | Clash (%) |" in a.markdown
    assert a.multi.n_samples == 2 * 2 and a.csv.count("\n") == 3
    assert a.chains[0].k == 2 and a.chains[1].k == 1
    assert a.multi == b.multi


def test_failed_outcome_names_metric(tmp_path):
    spec = _tiny(expected=("ged_5x_lower",))
    with pytest.raises(ExperimentFailure, match="ged_5x_lower"):
        # two epochs are far too few for a 5x structural gap
        run_experiment(spec, tmp_path)
    assert "[FAIL]" in (tmp_path / "tiny" / "summary.md").read_text()


def test_run_all_cross_spec_margin(tmp_path):
    results, failures = run_all([_tiny("compact", ()), _tiny("flexible", (), flexibility=30.0)], tmp_path)
    c, f = results[0].gain("rmsd"), results[1].gain("rmsd")
    assert (f < c) == (not any("rmsd margin" in m for m in failures))
    assert (tmp_path / "README.md").exists()
