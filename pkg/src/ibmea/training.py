"""Joint training: config, model bundle, optimisation step, iterative expansion, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .encoders import (
    MODALITIES,
    NON_GRAPH,
    SIGMA_INIT_BIAS,
    EncoderParams,
    GaussianEmbedding,
    edge_index_from_adjacency,
    positive_scale,
    reparameterize,
)
from .errors import ConfigError, NumericalError
from .evaluation import compute_metrics, cosine_scores, rank_alignments
from .fusion import FusionParams, MSLossConfig, fuse, hybrid_contrastive_loss
from .mmkg import build_task_features
from .objectives import DEFAULT_BETA, BatchPairs, kl_minimality, modal_specific_loss

logger = logging.getLogger(__name__)

IB_FLAGS = {"w/o G-IB": "g", "w/o V-IB": "v", "w/o A-IB": "a", "w/o R-IB": "r"}
DROP_FLAGS = {"w/o graph": "g", "w/o image": "v", "w/o attribute": "a", "w/o relation": "r"}
VARIANTS = ("full", *IB_FLAGS, "Hybrid-IB", *DROP_FLAGS)


# ---------------------------------------------------------------------------
# configuration


def _from_dict(cls, data, path, required=()):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(path + k for k in unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(path + k for k in missing)}")
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        kwargs[k] = _from_dict(sub, v, f"{path}{k}.") if sub else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class IterativeConfig:
    enabled: bool = True
    start_epoch: int = 100
    period: int = 50
    confidence_rule: str = "stable-MNN"

    def __post_init__(self):
        if self.period < 1 or self.start_epoch < 0:
            raise ConfigError("iterative.period must be >= 1 and start_epoch >= 0")
        if self.confidence_rule not in ("stable-MNN", "MNN"):
            raise ConfigError(f"unknown confidence_rule {self.confidence_rule!r}")


@dataclass
class ModelConfig:
    d_g: int = 300
    graph_hidden: int = 300
    graph_out: int = 300
    modal_out: int = 100
    fusion_dim: int = 100
    heads: int = 2
    d_a: int = 1000
    d_r: int = 1000
    dropout: float = 0.0
    learn_node_features: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        for k in ("d_g", "graph_hidden", "graph_out", "modal_out", "fusion_dim", "heads", "d_a", "d_r"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"model.{k} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class AblationConfig:
    no_ib: list = field(default_factory=list)  # modalities trained without their IB regularizer
    drop: list = field(default_factory=list)  # modalities removed from the model
    hybrid_ib: bool = False  # single IB on a Gaussian head over the fused embedding
    beta_hybrid: float = 1e-2

    def __post_init__(self):
        for m in (*self.no_ib, *self.drop):
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r} in ablation flags")
        if len(set(self.drop)) >= len(MODALITIES):
            raise ConfigError("cannot drop every modality")

    @classmethod
    def from_variant(cls, name):
        if name == "full":
            return cls()
        if name in IB_FLAGS:
            return cls(no_ib=[IB_FLAGS[name]])
        if name in DROP_FLAGS:
            return cls(drop=[DROP_FLAGS[name]])
        if name == "Hybrid-IB":
            return cls(hybrid_ib=True)
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 7500
    learning_rate: float = 6e-3
    weight_decay: float = 1e-2
    beta: dict = field(default_factory=lambda: dict(DEFAULT_BETA))
    tau: float = 0.1
    iterative: IterativeConfig = field(default_factory=IterativeConfig)
    rng_seed: int = 0
    eval_every: int = 50
    grad_clip: float = 1.0
    use_discriminator: bool = False
    candidates: str = "test"
    model: ModelConfig = field(default_factory=ModelConfig)
    ms_loss: MSLossConfig = field(default_factory=MSLossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    REQUIRED = (
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "beta",
        "tau",
        "iterative",
        "rng_seed",
        "eval_every",
    )

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.tau <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0, tau > 0")
        if set(self.beta) != set(MODALITIES) or any(b < 0 for b in self.beta.values()):
            raise ConfigError(f"beta needs a non-negative value for each of {MODALITIES}")
        if self.candidates not in ("test", "all"):
            raise ConfigError(f"candidates must be 'test' or 'all', got {self.candidates!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data, partial=False):
        """Build from a JSON-style dict; unknown keys are rejected at every level.

        Unless ``partial``, every key in ``REQUIRED`` must be present.
        """
        return _from_dict(cls, data, "", () if partial else cls.REQUIRED)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def modalities(self):
        return tuple(m for m in MODALITIES if m not in self.ablation.drop)


_NESTED = {
    (TrainConfig, "iterative"): IterativeConfig,
    (TrainConfig, "model"): ModelConfig,
    (TrainConfig, "ms_loss"): MSLossConfig,
    (TrainConfig, "ablation"): AblationConfig,
}


def load_config(path, partial=False):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return TrainConfig.from_dict(data, partial=partial)


def seed_streams(rng_seed):
    """Named integer seeds derived from one master seed."""
    names = ("data", "init", "sampling", "negatives")
    children = np.random.SeedSequence(int(rng_seed)).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _substream_seed(base, *counters):
    return int(np.random.SeedSequence([base, *counters]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# model


class KGTensors:
    """Torch views of one KG's raw modality features."""

    def __init__(self, feats, dtype=torch.float32):
        self.raw = feats
        self.x = {m: torch.as_tensor(feats.modality(m), dtype=dtype) for m in MODALITIES}
        self.edge_index = edge_index_from_adjacency(feats.adjacency)
        self.n = feats.n_entities


class IBMEAModel(nn.Module):
    """Shared encoders + fusion, plus the per-KG learnable node features."""

    def __init__(self, feats1, feats2, mcfg, ablation=None):
        super().__init__()
        self.mcfg = mcfg
        self.ablation = ablation or AblationConfig()
        dtype = mcfg.torch_dtype
        x1 = torch.as_tensor(feats1.x_g, dtype=dtype)
        x2 = torch.as_tensor(feats2.x_g, dtype=dtype)
        self.node_features = nn.ParameterList(
            [nn.Parameter(x1.clone(), requires_grad=mcfg.learn_node_features),
             nn.Parameter(x2.clone(), requires_grad=mcfg.learn_node_features)]
        )
        d_in = {m: feats1.modality(m).shape[1] for m in NON_GRAPH}
        self.encoders = EncoderParams(
            x1.shape[1], d_in, mcfg.graph_hidden, mcfg.graph_out, mcfg.modal_out, mcfg.heads, mcfg.dropout
        )
        dims = {m: self.encoders.out_dim(m) for m in MODALITIES}
        self.fusion = FusionParams(dims, mcfg.fusion_dim)
        d = mcfg.fusion_dim
        self.hybrid_head = nn.ModuleDict({"mu": nn.Linear(d, d), "sigma": nn.Linear(d, d)})
        nn.init.constant_(self.hybrid_head["sigma"].bias, SIGMA_INIT_BIAS)
        self.to(dtype)

    @property
    def modalities(self):
        return tuple(m for m in MODALITIES if m not in self.ablation.drop)

    def is_variational(self, m):
        return not self.ablation.hybrid_ib and m not in self.ablation.no_ib

    def posteriors(self, side, data):
        """GaussianEmbedding per active modality for KG ``side`` (0 or 1)."""
        out = {}
        for m in self.modalities:
            if m == "g":
                out[m] = self.encoders.graph(self.node_features[side], data.edge_index)
            else:
                out[m] = self.encoders.modal[m](data.x[m])
        return out

    def hybrid_posterior(self, z_o):
        return GaussianEmbedding(
            self.hybrid_head["mu"](z_o),
            positive_scale(self.hybrid_head["sigma"](z_o)),
        )

    @torch.no_grad()
    def embed(self, side, data):
        """Deterministic (posterior-mean) fused embedding for evaluation."""
        post = self.posteriors(side, data)
        h = fuse({m: g.mu for m, g in post.items()}, self.fusion, self.modalities)
        if self.ablation.hybrid_ib:
            return self.hybrid_posterior(h.z_o).mu
        return h.z_o


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: IBMEAModel
    optimizer: torch.optim.Optimizer
    data: tuple  # (KGTensors, KGTensors)
    seeds: dict
    epoch: int = 0  # completed epochs
    batch_in_epoch: int = 0
    global_step: int = 0
    pseudo_pairs: list = field(default_factory=list)  # (e1, e2, confidence)
    prev_mnn: set = field(default_factory=set)
    expansion_rounds: int = 0
    last_terms: dict = field(default_factory=dict)


def make_optimizer(model, cfg):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def init_state(task, cfg, features=None):
    """Fresh state: raw features (unless supplied), seeded parameters, optimizer."""
    seeds = seed_streams(cfg.rng_seed)
    mcfg = cfg.model
    if features is None:
        features = build_task_features(task, mcfg.d_g, seeds["data"], mcfg.d_a, mcfg.d_r)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeds["init"])
        model = IBMEAModel(features[0], features[1], mcfg, cfg.ablation)
    data = tuple(KGTensors(f, mcfg.torch_dtype) for f in features)
    return TrainState(model=model, optimizer=make_optimizer(model, cfg), data=data, seeds=seeds)


def training_pairs(state, task):
    pairs = [tuple(p) for p in task.train_pairs.tolist()]
    pairs += [(e1, e2) for e1, e2, _ in state.pseudo_pairs]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def epoch_batches(state, task, cfg, epoch):
    pairs = training_pairs(state, task)
    rng = np.random.default_rng(_substream_seed(state.seeds["negatives"], epoch))
    pairs = pairs[rng.permutation(len(pairs))]
    n_batches = max(1, math.ceil(len(pairs) / cfg.batch_size))
    return [pairs[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(n_batches)]


def compute_losses(model, data, batch, cfg, generator=None, sample=True):
    """Overall loss and its per-term breakdown for one batch.

    Terms: ``kl_<m>``, ``align_<m>`` per active modality, ``hybrid``,
    ``kl_hybrid`` (Hybrid-IB only), ``specific``, ``hybrid_total``, ``total``.
    With ``sample=False`` the reparameterisation returns posterior means.
    """
    post = [model.posteriors(0, data[0]), model.posteriors(1, data[1])]
    z = [{}, {}]
    for side in (0, 1):
        for m, g in post[side].items():
            det = not sample or not model.is_variational(m)
            z[side][m] = reparameterize(g, deterministic=det, generator=generator)

    terms = {}
    specific = 0.0
    for m in model.modalities:
        parts = {}
        beta = cfg.beta[m] if model.is_variational(m) else 0.0
        specific = specific + modal_specific_loss(
            post[0][m], post[1][m], z[0][m], z[1][m], batch, beta, cfg.tau, parts
        )
        if model.is_variational(m):
            terms[f"kl_{m}"] = parts["kl"]
        terms[f"align_{m}"] = parts["align"]

    h = [fuse(z[side], model.fusion, model.modalities) for side in (0, 1)]
    zo = [h[0].z_o, h[1].z_o]
    hybrid_total = 0.0
    if model.ablation.hybrid_ib:
        ho = [model.hybrid_posterior(zo[0]), model.hybrid_posterior(zo[1])]
        zo = [reparameterize(g, deterministic=not sample, generator=generator) for g in ho]
        kl_h = kl_minimality(ho[0], batch.left) + kl_minimality(ho[1], batch.right)
        terms["kl_hybrid"] = kl_h
        hybrid_total = model.ablation.beta_hybrid * kl_h
    stats = {}
    hybrid = hybrid_contrastive_loss(zo[0], zo[1], batch, cfg.ms_loss, cfg.use_discriminator, stats)
    terms["hybrid"] = hybrid
    hybrid_total = hybrid_total + hybrid
    terms["specific"] = specific
    terms["hybrid_total"] = hybrid_total
    terms["total"] = specific + hybrid_total
    return terms["total"], terms, h


def train_step(state, task, cfg):
    """One AdamW step on the next batch; advances the epoch counter when the epoch's batches run out."""
    batches = epoch_batches(state, task, cfg, state.epoch)
    pairs = batches[state.batch_in_epoch]
    batch = BatchPairs(torch.as_tensor(pairs))
    model = state.model
    model.train()
    gen = torch.Generator().manual_seed(_substream_seed(state.seeds["sampling"], state.global_step))
    loss, terms, _ = compute_losses(model, state.data, batch, cfg, generator=gen)
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
    if not math.isfinite(values["total"]):
        raise NumericalError(f"non-finite loss at epoch {state.epoch} step {state.global_step}", values)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.grad_clip:
        norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        if not torch.isfinite(norm):
            raise NumericalError(f"non-finite gradient at epoch {state.epoch} step {state.global_step}", values)
    state.optimizer.step()
    state.global_step += 1
    state.batch_in_epoch += 1
    if state.batch_in_epoch >= len(batches):
        state.batch_in_epoch = 0
        state.epoch += 1
    state.last_terms = values
    return state, values["total"]


def train_epoch(state, task, cfg):
    start = state.epoch
    losses = []
    while state.epoch == start:
        state, loss = train_step(state, task, cfg)
        losses.append(loss)
    return state, float(np.mean(losses))


# ---------------------------------------------------------------------------
# iterative expansion


def mutual_nearest_pairs(z1, z2, left, right):
    """Mutually nearest (e1, e2, cosine) among candidate id lists ``left``/``right``."""
    if len(left) == 0 or len(right) == 0:
        return []
    s = cosine_scores(z1[left], z2[right])
    nn12 = s.argmax(axis=1)
    nn21 = s.argmax(axis=0)
    out = []
    for i, j in enumerate(nn12):
        if nn21[j] == i:
            out.append((int(left[i]), int(right[j]), float(s[i, j])))
    return out


def iterative_expand(state, task, cfg):
    """Refresh pseudo pairs from mutually nearest unaligned entities.

    Under ``stable-MNN`` a pair is kept only if it was also mutually nearest
    in the previous round; pairs that stop qualifying are dropped.
    """
    if not cfg.iterative.enabled:
        return state
    model = state.model
    model.eval()
    z1 = model.embed(0, state.data[0]).cpu().numpy()
    z2 = model.embed(1, state.data[1]).cpu().numpy()
    left = np.setdiff1d(np.arange(task.kg1.n_entities), task.train_pairs[:, 0])
    right = np.setdiff1d(np.arange(task.kg2.n_entities), task.train_pairs[:, 1])
    mnn = mutual_nearest_pairs(z1, z2, left, right)
    current = {(a, b) for a, b, _ in mnn}
    if cfg.iterative.confidence_rule == "stable-MNN":
        keep = current & state.prev_mnn
    else:
        keep = current
    state.pseudo_pairs = [(a, b, c) for a, b, c in mnn if (a, b) in keep]
    state.prev_mnn = current
    state.expansion_rounds += 1
    # a new pair set changes the batch layout, so realign to an epoch boundary
    state.batch_in_epoch = 0
    return state


def expansion_due(epoch, cfg):
    it = cfg.iterative
    return it.enabled and epoch >= it.start_epoch and (epoch - it.start_epoch) % it.period == 0


# ---------------------------------------------------------------------------
# evaluation hooks


def evaluate_state(state, pairs, candidates="test", direction="both", metadata=None):
    model = state.model
    model.eval()
    z1 = model.embed(0, state.data[0])
    z2 = model.embed(1, state.data[1])
    r = rank_alignments(z1, z2, pairs, candidates=candidates)
    return compute_metrics(r, direction=direction, metadata=metadata).check()


def eval_record(state, task, cfg, loss_terms=None):
    test = evaluate_state(state, task.test_pairs, cfg.candidates)
    train = evaluate_state(state, task.train_pairs, cfg.candidates)
    return {
        "epoch": state.epoch,
        "h1": test.h1,
        "h10": test.h10,
        "mrr": test.mrr,
        "n_pairs": test.n_pairs,
        "train": {"h1": train.h1, "h10": train.h10, "mrr": train.mrr},
        "n_pseudo": len(state.pseudo_pairs),
        "loss_terms": dict(loss_terms or {}),
    }


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ConfigError):
    pass


def save_checkpoint(state, cfg, path, extra=None):
    """Write ``<path>.pt`` (tensors, optimizer moments, counters) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "global_step": state.global_step,
        "pseudo_pairs": state.pseudo_pairs,
        "prev_mnn": sorted(state.prev_mnn),
        "expansion_rounds": state.expansion_rounds,
    }
    manifest = {
        "config": cfg.to_dict(),
        "seeds": state.seeds,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "dims": {
            "n_entities": [d.n for d in state.data],
            "inputs": {m: int(state.data[0].x[m].shape[1]) for m in MODALITIES},
        },
    }
    manifest.update(extra or {})
    tmp = path.with_suffix(".pt.tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path.with_suffix(".pt"))
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, path.with_suffix(".json"))


def read_manifest(path):
    try:
        with open(Path(path).with_suffix(".json"), encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None


def load_checkpoint(path, task, cfg=None, features=None):
    """Rebuild a TrainState from a checkpoint written by :func:`save_checkpoint`."""
    manifest = read_manifest(path)
    if cfg is None:
        try:
            cfg = TrainConfig.from_dict(manifest["config"])
        except (KeyError, ConfigError) as exc:
            raise CheckpointError(f"checkpoint manifest holds an invalid config: {exc}") from None
    state = init_state(task, cfg, features)
    dims = manifest.get("dims", {})
    actual = {m: int(state.data[0].x[m].shape[1]) for m in MODALITIES}
    if dims.get("n_entities") != [d.n for d in state.data] or dims.get("inputs") != actual:
        raise CheckpointError("checkpoint dimensions do not match the dataset")
    try:
        payload = torch.load(Path(path).with_suffix(".pt"), weights_only=False)
        state.model.load_state_dict(payload["model"])
        state.optimizer.load_state_dict(payload["optimizer"])
    except Exception as exc:  # corrupt archive or mismatched tensors
        raise CheckpointError(f"unreadable checkpoint: {exc}") from None
    state.epoch = payload["epoch"]
    state.batch_in_epoch = payload["batch_in_epoch"]
    state.global_step = payload["global_step"]
    state.pseudo_pairs = [tuple(p) for p in payload["pseudo_pairs"]]
    state.prev_mnn = {tuple(p) for p in payload["prev_mnn"]}
    state.expansion_rounds = payload["expansion_rounds"]
    return state, cfg


# ---------------------------------------------------------------------------
# orchestration


def run_training(task, cfg, features=None, state=None, out_dir=None, log_path=None, on_eval=None):
    """Train for ``cfg.epochs`` epochs with periodic evaluation.

    Returns ``(state, history)`` where history holds one record per
    evaluation (see :func:`eval_record`). With ``out_dir`` the best-test-H@1
    and final checkpoints are written there; with ``log_path`` each record is
    appended as one JSON line.
    """
    state = state or init_state(task, cfg, features)
    history = []
    best = -1.0
    log = open(log_path, "a", encoding="utf-8") if log_path else None

    def record(terms):
        nonlocal best
        rec = eval_record(state, task, cfg, terms)
        history.append(rec)
        if log:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
        if on_eval:
            on_eval(rec)
        if out_dir and rec["h1"] is not None and rec["h1"] > best:
            best = rec["h1"]
            save_checkpoint(state, cfg, Path(out_dir) / "best", {"metrics": rec})
        return rec

    try:
        if state.epoch == 0 and state.global_step == 0:
            record({})
        while state.epoch < cfg.epochs:
            state, _ = train_epoch(state, task, cfg)
            if expansion_due(state.epoch, cfg):
                iterative_expand(state, task, cfg)
            if state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs:
                record(state.last_terms)
        if out_dir:
            save_checkpoint(state, cfg, Path(out_dir) / "final", {"metrics": history[-1] if history else None})
    finally:
        if log:
            log.close()
    return state, history
