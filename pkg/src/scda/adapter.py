"""Training driver: adversarial pre-training, then alternating discovery and adaptation."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import discovery, evaluation, losses, net
from .data import LabeledSet, TargetSet, batches
from .errors import ContractError, NumericalError
from .numkit import Rng

log = logging.getLogger(__name__)

MODES = evaluation.ABLATION_MODES


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    Optimiser settings follow the original recipe. Network size, epoch counts,
    the feature activation and ``grl_lambda`` are calibrated for the synthetic
    benchmark (see README); ``grl_lambda=1`` gives the full reversal.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    pretrain_epochs: int = 30
    inner_epochs: int = 10
    outer_epochs: int = 15
    k_max: int = 10
    pca_dim: int = 16
    grl_lambda: float = 0.0
    seed: int = 0
    ablation_mode: str = "full"
    k_gt: int | None = None
    hidden: tuple = (64, 64)
    feature_dim: int = 32
    feature_activation: str = "l2norm"
    kmeans_restarts: int = 8
    kmeans_max_iter: int = 100
    kneedle_sensitivity: float = 1.0
    ca_tie_break: str = "elbow"

    def validate(self) -> "TrainConfig":
        for name in ("pretrain_epochs", "inner_epochs", "outer_epochs"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        for name in ("k_max", "pca_dim", "feature_dim", "kmeans_restarts", "kmeans_max_iter"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ContractError("hidden widths must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ContractError("lr must be > 0")
        if self.ca_tie_break not in discovery.TIE_BREAKS:
            raise ContractError(f"ca_tie_break must be one of {discovery.TIE_BREAKS}")
        if self.feature_activation not in net.ACTIVATIONS:
            raise ContractError(f"unknown feature_activation {self.feature_activation!r}")
        if self.ablation_mode not in MODES:
            raise ContractError(f"unknown ablation_mode {self.ablation_mode!r}")
        if self.ablation_mode.startswith("k_gt") and (self.k_gt is None or self.k_gt < 1):
            raise ContractError(f"{self.ablation_mode} needs k_gt >= 1")
        return self

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunState:
    model: net.Model
    k_star: int = 1
    epoch: int = 0
    history: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    discovery: discovery.DiscoveryResult | None = None
    estimate: discovery.KEstimate | None = None
    f_sgd: net.SgdState | None = None
    c_sgd: net.SgdState | None = None


def build_model(cfg: TrainConfig, input_dim: int, num_known: int, rng: Rng) -> net.Model:
    sizes = [input_dim, *cfg.hidden, cfg.feature_dim]
    acts = ["relu"] * len(cfg.hidden) + [cfg.feature_activation]
    f = net.Mlp.build(sizes, acts, rng.child("F"))
    c = net.SoftmaxClassifier.build(cfg.feature_dim, num_known, 1, rng.child("C"))
    return net.Model(f, c)


def _sgd(cfg):
    return net.SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)


def _finite(values: dict, where: str, epoch: int):
    for k, v in values.items():
        if not np.isfinite(v):
            raise NumericalError(f"{k} became non-finite during {where}", epoch=epoch)


def _cycle(seq, i):
    return seq[i % len(seq)]


def pretrain_step(model, xs, ys, xt, grl_lambda: float):
    """Loss bundle and combined gradient for one source/target batch pair."""
    f, c = model.f, model.c
    nk = c.num_known
    _, ps, cache_s = net.forward(f, c, xs)
    l_s, dz_s = losses.cross_entropy(ps, ys)
    _, pt, cache_t = net.forward(f, c, xt)
    cm = losses.correlation_matrix(pt)
    l_adv, g_adv = losses.loss_adv(cm, nk)
    l_kcc, g_kcc = losses.loss_kcc(cm, nk)
    grads = (
        net.backward(f, c, cache_s, d_logits=dz_s)
        + net.backward(f, c, cache_t, d_probs=g_kcc)
        + net.backward(f, c, cache_t, d_probs=g_adv, scale=net.GradScale(-grl_lambda))
    )
    return losses.LossBundle(l_s=l_s, l_adv=l_adv, l_kcc=l_kcc), grads


def adapt_step(model, xs, ys, xp, yp, xt):
    """Gradient of ``L_s + L_t + L_tcc``; ``xp`` may be None when nothing is pseudo-labeled."""
    f, c = model.f, model.c
    _, ps, cache_s = net.forward(f, c, xs)
    l_s, dz_s = losses.cross_entropy(ps, ys)
    grads = net.backward(f, c, cache_s, d_logits=dz_s)
    l_t = None
    if xp is not None:
        if yp.max() >= c.out_dim:
            raise ContractError("pseudo-label exceeds the classifier width")
        _, pp, cache_p = net.forward(f, c, xp)
        l_t, dz_p = losses.cross_entropy(pp, yp)
        grads = grads + net.backward(f, c, cache_p, d_logits=dz_p)
    _, pt, cache_t = net.forward(f, c, xt)
    l_tcc, g_tcc = losses.loss_tcc(losses.correlation_matrix(pt))
    grads = grads + net.backward(f, c, cache_t, d_probs=g_tcc)
    return losses.LossBundle(l_s=l_s, l_t=l_t, l_tcc=l_tcc), grads


def _mean_bundle(bundles):
    keys = bundles[0].as_dict().keys()
    return {k: float(np.mean([getattr(b, k) for b in bundles])) for k in keys}


def pretrain(state: RunState, source: LabeledSet, target: TargetSet, cfg: TrainConfig, rng: Rng):
    model = state.model
    if model.c.k != 1:
        raise ContractError("pre-training expects a classifier with a single unknown output")
    if len(source) < 2 or len(target) < 2:
        raise ContractError("pre-training needs at least two source and two target samples")
    for epoch in range(cfg.pretrain_epochs):
        r = rng.child("pretrain", epoch)
        sb = batches(len(source), cfg.batch_size, r.child("s"))
        tb = batches(len(target), cfg.batch_size, r.child("t"))
        bundles = []
        for i in range(max(len(sb), len(tb))):
            s_idx, t_idx = _cycle(sb, i), _cycle(tb, i)
            b, g = pretrain_step(model, source.features[s_idx], source.labels[s_idx],
                                 target.features[t_idx], cfg.grl_lambda)
            bundles.append(b)
            net.apply_step(model, g, state.f_sgd, state.c_sgd)
        means = _mean_bundle(bundles)
        obj_f, obj_c = losses.pretrain_objectives(losses.LossBundle(**means))
        means.update(objective_f=obj_f, objective_c=obj_c)
        _finite(means, "pre-training", epoch)
        state.loss_curve.append({"phase": "pretrain", "outer": 0, "epoch": epoch, **means})
    return model


def _discover(state, target, cfg, rng, mode):
    """Step 1. Returns ``(k_star, pseudo_index, pseudo_labels, estimate, flags, candidates)``."""
    model = state.model
    cands = discovery.select_candidates(model.f, model.c, target.features, cfg.pca_dim)
    flags = []
    est = None
    if len(cands.im_index) == 0:
        flags.append("empty_unknown")
        return state.k_star, cands.kn_index, cands.kn_labels, None, flags, cands

    if mode in ("full", "k_star_no_iters"):
        est = discovery.estimate_k(
            cands, cfg.k_max, rng.child("estimate"), cfg.kmeans_restarts,
            cfg.kmeans_max_iter, cfg.kneedle_sensitivity, prior_k=state.k_star,
            tie_break=cfg.ca_tie_break,
        )
        if est.elbow_fallback:
            flags.append("elbow_fallback")
        k_star = min(est.k_star, cfg.k_max)
    elif mode == "k_fixed_1":
        k_star = 1
    else:
        k_star = cfg.k_gt
    res = discovery.assign_pseudo_classes(cands, k_star, rng.child("assign"),
                                          cfg.kmeans_restarts, cfg.kmeans_max_iter)
    if res.clamped:
        flags.append("k_star_clamped")
    state.discovery = res
    idx = np.concatenate([cands.kn_index, res.im_index])
    lab = np.concatenate([cands.kn_labels, res.im_labels])
    return res.k_star, idx, lab, est, flags, cands


def adapt_epoch(state: RunState, source: LabeledSet, target: TargetSet, cfg: TrainConfig,
                rng: Rng):
    """One outer iteration: discover, rebuild C, then retrain F and C."""
    mode = cfg.ablation_mode
    model = state.model
    state.epoch += 1
    k_star, p_idx, p_lab, est, flags, _ = _discover(state, target, cfg, rng.child("discover"),
                                                     mode)
    if est is not None:
        state.estimate = est  # keep the last real sweep when discovery is skipped
    if "empty_unknown" not in flags:
        model.c = net.restructure(model.c, k_star, rng.child("restructure"))
        state.c_sgd.reset()
        state.k_star = k_star
    target.pseudo_labels[:] = -1
    target.pseudo_labels[p_idx] = p_lab

    bundles = []
    for epoch in range(cfg.inner_epochs):
        r = rng.child("inner", epoch)
        sb = batches(len(source), cfg.batch_size, r.child("s"))
        tb = batches(len(target), cfg.batch_size, r.child("t"))
        pb = [p_idx[b] for b in batches(len(p_idx), cfg.batch_size, r.child("p"))] \
            if len(p_idx) >= 2 else []
        epoch_bundles = []
        for i in range(max(len(sb), len(tb))):
            s_idx, t_idx = _cycle(sb, i), _cycle(tb, i)
            xp = yp = None
            if pb:
                sel = _cycle(pb, i)
                xp, yp = target.features[sel], target.pseudo_labels[sel]
            b, g = adapt_step(model, source.features[s_idx], source.labels[s_idx], xp, yp,
                              target.features[t_idx])
            epoch_bundles.append(b)
            net.apply_step(model, g, state.f_sgd, state.c_sgd)
        means = _mean_bundle(epoch_bundles)
        means["objective"] = losses.adapt_objective(losses.LossBundle(**means))
        _finite(means, "adaptation", state.epoch)
        state.loss_curve.append({"phase": "adapt", "outer": state.epoch, "epoch": epoch, **means})
        bundles = epoch_bundles

    record = {
        "epoch": state.epoch,
        "k_star": state.k_star,
        "k_ca": est.k_ca if est else None,
        "k_elbow": est.k_elbow if est else None,
        "losses": _mean_bundle(bundles) if bundles else {},
        "flags": flags,
    }
    state.history.append(record)
    return state


def outer_epochs(cfg: TrainConfig) -> int:
    mode = cfg.ablation_mode
    if mode == "pretrain_only":
        return 0
    if mode in ("k_star_no_iters", "k_gt_no_iters"):
        return 1
    return cfg.outer_epochs


def run(cfg: TrainConfig, source: LabeledSet, target: TargetSet, evaluate: bool = True,
        log_file=None, checkpoint_dir=None):
    """Pre-train, then run the outer loop for the configured ablation mode.

    With ``evaluate=False`` ground truth is never touched and the returned
    report is None. ``log_file`` receives one JSON line per outer epoch;
    ``checkpoint_dir`` receives ``checkpoint_XXX.json`` after every epoch.
    """
    cfg.validate()
    if source.dim != target.dim:
        raise ContractError("source and target feature dimensions differ")
    rng = Rng(cfg.seed)
    nk = source.num_classes
    model = build_model(cfg, source.dim, nk, rng.child("init"))
    state = RunState(model, f_sgd=_sgd(cfg), c_sgd=_sgd(cfg))
    provenance = {"seed": cfg.seed, "config_hash": cfg.digest()}

    pretrain(state, source, target, cfg, rng.child("pretrain"))

    def after_epoch():
        rec = state.history[-1] if state.history else {"epoch": 0, "k_star": 1, "k_ca": None,
                                                        "k_elbow": None, "flags": []}
        if not state.history:
            last = state.loss_curve[-1] if state.loss_curve else {}
            rec["losses"] = {k: last[k] for k in ("l_s", "l_adv", "l_kcc") if k in last}
            state.history.append(rec)
        if evaluate:
            _, probs, _ = net.forward(model.f, model.c, target.features)
            os_, os_star, _ = evaluation.os_metrics(np.argmax(probs, axis=1), target, nk)
            rec["os"], rec["os_star"] = os_, os_star
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
        if checkpoint_dir is not None:
            net.save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{rec['epoch']:03d}.json", model)
        log.info("epoch %d k*=%d %s", rec["epoch"], state.k_star,
                 {k: rec[k] for k in ("os", "os_star") if k in rec})

    after_epoch()
    for t in range(outer_epochs(cfg)):
        adapt_epoch(state, source, target, cfg, rng.child("outer", t))
        after_epoch()

    report = None
    if evaluate:
        report = evaluation.evaluate(model, target, cfg.ablation_mode, provenance=provenance)
        report.history = state.history
        if state.estimate is not None:
            report.sweep = [list(row) for row in state.estimate.sweep]
    return model, state, report
