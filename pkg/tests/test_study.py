import numpy as np
import pandas as pd
import pytest

from distforge.cli import EXIT_OK, main
from distforge.market_sim import DgpSpec, simulate_panel
from distforge.qnn import TrainConfig
from distforge.study import StudyConfig, run_repetition, split_dates, summarize

TINY = StudyConfig(dgp=DgpSpec(n_stocks=8, n_years=6), train_years=4, true_paths=300,
                   garch_paths=300, garch_window=300,
                   train=TrainConfig(batch_size=256, ensemble_size=1, max_epochs=2))


@pytest.fixture(scope="module")
def rep():
    return run_repetition(TINY, seed=1, keep=True)


def test_config_needs_test_period():
    with pytest.raises(ValueError):
        StudyConfig(dgp=DgpSpec(n_years=5), train_years=5)


def test_training_labels_end_before_test_period():
    sim = simulate_panel(TINY.dgp, seed=0)
    train_t, test_t = split_dates(sim, TINY)
    split = TINY.train_years * 264
    assert train_t.min() == TINY.burn_in_days and np.all(train_t + 22 < split)
    assert np.all(np.diff(train_t) == TINY.sample_step)
    assert test_t.min() == split - 1 and np.all(test_t + 22 < TINY.dgp.n_days)
    assert test_t.size == 2 * 12


def test_repetition_result_shape(rep):
    assert rep.rmse_nn.shape == rep.rmse_garch.shape == (37,)
    assert np.all(np.isfinite(rep.rmse_nn)) and np.all(rep.rmse_garch > 0)
    assert rep.n_records + rep.n_excluded == 24 * 8 and rep.n_records > 0
    assert rep.forecasts.monotone() and np.isfinite(rep.aql_nn) and np.isfinite(rep.aql_garch)
    assert set(rep.seconds) == {"simulate", "train", "garch", "truth"}
    assert isinstance(rep.nn_wins(), bool)


def test_repetition_is_bit_reproducible(rep):
    again = run_repetition(TINY, seed=1)
    assert again.rmse_nn.tobytes() == rep.rmse_nn.tobytes()
    assert again.rmse_garch.tobytes() == rep.rmse_garch.tobytes()


def test_summary_counts_wins(rep):
    other = run_repetition(TINY, seed=2)
    tab = summarize([rep, other])
    assert len(tab) == 37 and tab["nn_wins"].between(0, 2).all()
    np.testing.assert_allclose(tab["nn_mean"], (rep.rmse_nn + other.rmse_nn) / 2, rtol=1e-15)


def test_repro_sim_command(tmp_path, capsys):
    argv = ["repro-sim", "--reps", "1", "--out", str(tmp_path),
            "--set", "simulate.n_stocks=8", "--set", "simulate.n_years=6",
            "--set", "study.train_years=4", "--set", "study.true_paths=300",
            "--set", "study.garch_paths=300", "--set", "garch.window=300",
            "--set", "study.ensemble_size=1", "--set", "train.max_epochs=2",
            "--set", "study.batch_size=256"]
    assert main(argv) == EXIT_OK
    assert "wins" in capsys.readouterr().out
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert len(summary) == 37 and (tmp_path / "rmse_rep0.csv").is_file()
