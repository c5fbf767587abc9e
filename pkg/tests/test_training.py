import csv

import numpy as np
import pytest

import socpath.training as training
from socpath.control import ControlFunction
from socpath.exceptions import ConfigurationError, ConvergenceError
from socpath.model import ModelSystem
from socpath.nn.checkpoint import load_checkpoint
from socpath.training import TrainConfig, bridge_baseline, train, validate


def small_cfg(**kw):
    base = dict(objective="propagator", x0=[0.3], xT=[0.3], K_train=8, K_eval=16, B_train=16,
                epochs=6, lr=1e-2, validate_every=2, B_eval=256, eps=0.05, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def mlp_control(system, seed=0):
    return ControlFunction.for_system(system, "mlp", hidden=(8,), seed=seed)


@pytest.mark.parametrize(
    "kw,field",
    [
        (dict(objective="energy"), "objective"),
        (dict(lr_schedule="step"), "lr_schedule"),
        (dict(K_train=32, K_eval=16), "K_train"),
        (dict(x0=None), "x0"),
        (dict(objective="free_energy", B_train=8, M_train=16), "B_train"),
        (dict(epochs=0), "epochs"),
    ],
)
def test_config_validation(kw, field):
    with pytest.raises(ConfigurationError) as err:
        small_cfg(**kw)
    assert err.value.field == field


def test_cosine_schedule_endpoints():
    cfg = small_cfg(lr=0.1, lr_min=0.001, lr_schedule="cosine", epochs=11)
    assert cfg.step_size(0) == pytest.approx(0.1)
    assert cfg.step_size(10) == pytest.approx(0.001)
    assert cfg.step_size(5) == pytest.approx(0.0505)
    assert small_cfg(lr=0.1).step_size(4) == 0.1


def test_training_is_deterministic():
    s = ModelSystem.anharmonic(1.0, 1.0)
    a = train(s, mlp_control(s), None, small_cfg())
    b = train(s, mlp_control(s), None, small_cfg())
    assert a.checkpoint_id == b.checkpoint_id
    assert [r["coarse_loss"] for r in a.curve] == [r["coarse_loss"] for r in b.curve]


def test_best_checkpoint_is_monotone_minimum(tmp_path):
    s = ModelSystem.anharmonic(1.0, 1.0)
    cfg = small_cfg(checkpoint_path=str(tmp_path / "ck.json"), curve_path=str(tmp_path / "curve.csv"))
    res = train(s, mlp_control(s), None, cfg)
    fine = [r["fine_loss"] for r in res.curve if r["fine_loss"] is not None]
    assert len(fine) == 4  # epochs 0, 2, 4 and the final one
    assert res.best_loss == min(fine)
    ck = load_checkpoint(tmp_path / "ck.json")
    assert ck["metadata"]["validation_loss"] == res.best_loss
    with open(tmp_path / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "coarse_loss", "fine_loss", "walltime"]
    assert len(rows) == cfg.epochs + 1
    # the returned control carries the best parameters
    var, _ = validate(s, res.control, cfg, seed=cfg.seed + training.VALID_STREAM)
    assert var.value == pytest.approx(res.best_loss)


def test_nan_epochs_are_skipped(monkeypatch):
    s = ModelSystem.anharmonic(1.0, 1.0)
    real = training._epoch_loss

    def flaky(system, ctrl, P, cfg, grid, epoch, params):
        loss = real(system, ctrl, P, cfg, grid, epoch, params)
        return loss * np.nan if epoch in (1, 3) else loss

    monkeypatch.setattr(training, "_epoch_loss", flaky)
    logs = []
    res = train(s, mlp_control(s), None, small_cfg(), log=logs.append)
    assert res.skipped_epochs == 2
    assert sum("skipped" in m for m in logs) == 2
    assert all(np.all(np.isfinite(v)) for v in res.control.residual.params.values())


def test_consecutive_nan_epochs_abort(monkeypatch):
    s = ModelSystem.anharmonic(1.0, 1.0)
    monkeypatch.setattr(training, "_epoch_loss", lambda *a: np.float64(np.nan))
    with pytest.raises(ConvergenceError):
        train(s, mlp_control(s), None, small_cfg(max_bad_epochs=3))


def test_free_particle_residual_stays_small():
    s = ModelSystem.free(1.0)
    ctrl = mlp_control(s)
    train(s, ctrl, None, small_cfg(epochs=20, lr=1e-3, x0=[0.0], xT=[0.0]))
    x = np.linspace(-1, 1, 21)[:, None]
    res = [ctrl.residual_drift(x, t, np.zeros_like(x)) for t in (0.0, 0.5, 0.9)]
    rms = float(np.sqrt(np.mean(np.square(res))))
    assert rms < 0.05


def test_training_needs_residual():
    s = ModelSystem.anharmonic(1.0, 1.0)
    with pytest.raises(ConfigurationError):
        train(s, ControlFunction.for_system(s, None), None, small_cfg())


def test_free_energy_objective_rejects_fixed_endpoint():
    s = ModelSystem.anharmonic(1.0, 1.0)
    ctrl = ControlFunction.for_system(s, "mlp", hidden=(8,), endpoint=[0.0])
    with pytest.raises(ConfigurationError):
        train(s, ctrl, None, small_cfg(objective="free_energy", B_train=16, M_train=8))


def test_free_energy_training_improves_on_bridge():
    s = ModelSystem.anharmonic(5.0, 1.0)
    cfg = small_cfg(objective="free_energy", x0=None, xT=None, B_train=64, M_train=32, epochs=30,
                    lr=1e-2, validate_every=30, B_eval=1024, M_eval=512, K_train=16, K_eval=32)
    bridge_var, _ = bridge_baseline(s, cfg)
    res = train(s, mlp_control(s), None, cfg)
    assert res.best_loss <= bridge_var.value * s.beta + 1e-12
