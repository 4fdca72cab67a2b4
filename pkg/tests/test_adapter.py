import io
import json

import numpy as np
import pytest

from scda import adapter, net
from scda.adapter import RunState, TrainConfig
from scda.data import ShiftSpec, generate
from scda.errors import ContractError, NumericalError
from scda.numkit import Rng

TINY = dict(pretrain_epochs=3, inner_epochs=2, outer_epochs=2, hidden=(16,), feature_dim=8,
            pca_dim=4, k_max=5, kmeans_restarts=2, batch_size=32)


@pytest.fixture(scope="module")
def bench():
    spec = ShiftSpec(source_per_class=30, target_per_class=30)
    return generate(spec, Rng(0).child("data"))


def test_config_validation_and_digest():
    cfg = TrainConfig()
    assert cfg.digest() == TrainConfig().digest() != cfg.replace(seed=1).digest()
    for bad in (dict(batch_size=1), dict(lr=0.0), dict(ablation_mode="x"),
                dict(ablation_mode="k_gt_iters"), dict(ca_tie_break="x"),
                dict(feature_activation="x"), dict(outer_epochs=-1), dict(k_max=0)):
        with pytest.raises(ContractError):
            TrainConfig(**bad).validate()
    TrainConfig(ablation_mode="k_gt_iters", k_gt=3).validate()


def test_zero_pretrain_epochs_leave_model_unchanged(bench):
    source, target = bench
    cfg = TrainConfig(**{**TINY, "pretrain_epochs": 0})
    model = adapter.build_model(cfg, source.dim, 4, Rng(0))
    before = net.checkpoint_bytes(model)
    state = RunState(model, f_sgd=adapter._sgd(cfg), c_sgd=adapter._sgd(cfg))
    adapter.pretrain(state, source, target, cfg, Rng(1))
    assert net.checkpoint_bytes(model) == before


def test_pretrain_records_losses(bench):
    source, target = bench
    cfg = TrainConfig(**TINY)
    model = adapter.build_model(cfg, source.dim, 4, Rng(0))
    state = RunState(model, f_sgd=adapter._sgd(cfg), c_sgd=adapter._sgd(cfg))
    adapter.pretrain(state, source, target, cfg, Rng(1))
    assert len(state.loss_curve) == 3
    rec = state.loss_curve[-1]
    assert rec["objective_c"] - rec["objective_f"] == pytest.approx(2 * rec["l_adv"])
    with pytest.raises(ContractError):
        model.c = net.restructure(model.c, 2, Rng(0))
        adapter.pretrain(state, source, target, cfg, Rng(1))


def test_full_run_restructures_and_logs(bench, tmp_path):
    source, target = bench
    log = io.StringIO()
    model, state, report = adapter.run(TrainConfig(**TINY), source, target, log_file=log,
                                       checkpoint_dir=tmp_path)
    lines = [json.loads(x) for x in log.getvalue().splitlines()]
    assert [x["epoch"] for x in lines] == [0, 1, 2]
    assert model.c.out_dim == 4 + state.k_star == 4 + report.k_star
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "checkpoint_000.json", "checkpoint_001.json", "checkpoint_002.json"]
    assert report.sweep and report.provenance["seed"] == 0
    assert np.all(target.pseudo_labels[target.pseudo_labels >= 0] < model.c.out_dim)


@pytest.mark.parametrize("mode,k,epochs", [("pretrain_only", 1, 0), ("k_fixed_1", 1, 2),
                                           ("k_gt_no_iters", 3, 1), ("k_star_no_iters", None, 1)])
def test_ablation_modes(bench, mode, k, epochs):
    source, target = bench
    cfg = TrainConfig(**TINY, ablation_mode=mode, k_gt=3)
    model, state, report = adapter.run(cfg, source, target)
    assert len(state.history) == epochs + 1
    if k is not None:
        assert model.c.k == k
    if mode in ("k_fixed_1", "k_gt_no_iters", "pretrain_only"):
        assert report.sweep is None


def test_run_without_evaluation_returns_no_report(bench):
    source, target = bench
    _, _, report = adapter.run(TrainConfig(**TINY), source, target.without_ground_truth(),
                               evaluate=False)
    assert report is None


def test_non_finite_loss_raises_with_epoch(bench):
    source, target = bench
    cfg = TrainConfig(**{**TINY, "lr": 1e30})
    with pytest.raises(NumericalError) as exc, np.errstate(all="ignore"):
        adapter.run(cfg, source, target)
    assert exc.value.epoch is not None


def test_dimension_mismatch(bench):
    source, _ = bench
    from scda.data import TargetSet
    with pytest.raises(ContractError):
        adapter.run(TrainConfig(**TINY), source, TargetSet(np.zeros((4, 3))))
