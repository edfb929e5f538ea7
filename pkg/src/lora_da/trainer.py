"""Toy-scale MLP trainer for the odd-to-even digit transfer experiment.

A small rectifier MLP (default 784 -> 128 -> 10) is pretrained on
odd-labeled digits, per-layer curvature statistics are collected from a few
fine-tune samples, low-rank adapters are initialized by any of the supported
modes and trained on even-labeled digits while every base weight stays
frozen. All arithmetic is float64 numpy; runs are bit-reproducible for a
fixed (seed, config) in single-threaded mode.

Adapters follow the scaled convention ``W_eff = W_base + (alpha/r) A B``.
When an adapter is built from an init result, B is pre-divided by the scale
so the effective update at step 0 equals A0 B0 regardless of alpha. The
principal/minor weight-SVD modes additionally replace the layer's base
weight by their residual so the step-0 forward still reproduces the
pretrained model exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bundle import TensorBundle
from .guidance import GuidanceConfig, InitMode, InitResult, compute_init, parse_mode
from .mnist import Dataset
from .stats import LayerStats, StatsAccumulator, accumulate_batch, finalize


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class MlpSpec:
    widths: tuple = (784, 128, 10)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"bad layer widths {self.widths}")

    @property
    def n_layers(self):
        return len(self.widths) - 1


@dataclass
class TrainConfig:
    rank: int = 4
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    mode: str = "default"
    stats_samples: int = 256
    alpha: float = 16.0
    # mean-eigenvalue Tikhonov: 256-sample moment estimates at toy widths are
    # far too noisy for the library's light 1e-4 default
    damping_scale: float = 1.0
    grad_step_scale: float = 1.0
    eval_every: int = 20
    eval_max: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 3
    pretrain_batch_size: int = 64
    n_odd: int = 10000
    n_even: int = 1000

    def __post_init__(self):
        for name in ("rank", "batch_size", "epochs", "stats_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "alpha", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def reference_preset(cls) -> "TrainConfig":
        """The rank-8 / alpha-16 / lr 2e-4 / 1-epoch configuration used as the
        common benchmark setting; exposed for parity experiments."""
        return cls(rank=8, alpha=16.0, lr=2e-4, batch_size=32, epochs=1, weight_decay=0.0)


class Mlp:
    """Rectifier MLP with softmax cross-entropy, row-vector convention.

    Layer l maps activations h (n, d_in) to h @ W_l + b_l; every hidden
    layer applies the rectifier, the last layer feeds the softmax loss.
    """

    def __init__(self, spec: MlpSpec, weights, biases):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    @classmethod
    def init_random(cls, spec: MlpSpec, seed: int) -> "Mlp":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for d_in, d_out in zip(spec.widths[:-1], spec.widths[1:]):
            weights.append(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in))
            biases.append(np.zeros(d_out))
        return cls(spec, weights, biases)

    def layer_dims(self, layer_id: int):
        return self.weights[layer_id].shape

    def effective_weights(self, adapters=None):
        weights = [w for w in self.weights]
        if adapters:
            for ad in adapters:
                base = ad.base_override if ad.base_override is not None else weights[ad.layer_id]
                weights[ad.layer_id] = base + ad.scale * (ad.a @ ad.b)
        return weights

    def _forward(self, x, weights):
        """Returns (per-layer inputs, per-layer pre-activations, logits)."""
        inputs, preacts = [], []
        h = x
        n_layers = self.spec.n_layers
        for l in range(n_layers):
            inputs.append(h)
            z = h @ weights[l] + self.biases[l]
            preacts.append(z)
            h = np.maximum(z, 0.0) if l < n_layers - 1 else z
        return inputs, preacts, h

    def logits(self, x, adapters=None):
        return self._forward(x, self.effective_weights(adapters))[2]

    def predict(self, x, adapters=None):
        return np.argmax(self.logits(x, adapters), axis=1)

    def accuracy(self, data: Dataset, adapters=None) -> float:
        return float(np.mean(self.predict(data.images, adapters) == data.labels))

    def loss(self, x, y, adapters=None) -> float:
        return _softmax_ce(self.logits(x, adapters), y)

    def loss_and_grads(self, x, y, adapters=None, reduction="mean", capture=()):
        """Loss plus weight/bias gradients, optionally capturing per-layer
        inputs and output gradients for statistics collection.

        With ``reduction="sum"`` the captured output gradients are the exact
        per-sample loss gradients; with "mean" they carry the 1/n factor.
        """
        weights = self.effective_weights(adapters)
        inputs, preacts, logits = self._forward(x, weights)
        n = x.shape[0]
        probs = _softmax(logits)
        gy = probs.copy()
        gy[np.arange(n), y] -= 1.0
        if reduction == "mean":
            gy /= n
        elif reduction != "sum":
            raise ValueError(f"unknown reduction {reduction!r}")
        loss = _softmax_ce(logits, y)
        if reduction == "sum":
            loss *= n

        grads_w = [None] * self.spec.n_layers
        grads_b = [None] * self.spec.n_layers
        captured = {}
        for l in range(self.spec.n_layers - 1, -1, -1):
            if l in capture:
                captured[l] = (inputs[l], gy)
            grads_w[l] = inputs[l].T @ gy
            grads_b[l] = gy.sum(axis=0)
            if l > 0:
                gy = (gy @ weights[l].T) * (preacts[l - 1] > 0)
        return loss, grads_w, grads_b, captured


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_ce(logits, y) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(y)), y]))


@dataclass
class LoraAdapter:
    """Low-rank pair attached to one layer; the base weight never trains."""

    layer_id: int
    a: np.ndarray
    b: np.ndarray
    scale: float
    train_a: bool = True
    base_override: np.ndarray | None = None


def default_adapters(model: Mlp, rank: int, alpha: float, seed: int, train_a=True):
    """Standard zero-start adapters: uniform random A, zero B."""
    rng = np.random.default_rng(seed)
    out = []
    for layer_id in range(model.spec.n_layers):
        d1, d2 = model.layer_dims(layer_id)
        r = min(rank, min(d1, d2))
        bound = 1.0 / np.sqrt(d1)
        out.append(
            LoraAdapter(
                layer_id=layer_id,
                a=rng.uniform(-bound, bound, size=(d1, r)),
                b=np.zeros((r, d2)),
                scale=alpha / r,
                train_a=train_a,
            )
        )
    return out


def adapters_from_init(
    results: dict[int, InitResult], alpha: float, train_a=True
) -> list[LoraAdapter]:
    """Wrap per-layer init results, pre-dividing B by the adapter scale."""
    out = []
    for layer_id, res in sorted(results.items()):
        r = res.a0.shape[1]
        scale = alpha / r
        out.append(
            LoraAdapter(
                layer_id=layer_id,
                a=res.a0.copy(),
                b=res.b0 / scale,
                scale=scale,
                train_a=train_a,
                base_override=res.w_residual.copy() if res.w_residual is not None else None,
            )
        )
    return out


def model_to_bundle(model: Mlp, seed: int | None = None) -> TensorBundle:
    bundle = TensorBundle(meta={"n_layers": model.spec.n_layers})
    if seed is not None:
        bundle.meta["seed"] = int(seed)
    for l in range(model.spec.n_layers):
        bundle.add(f"layer.{l}.W", model.weights[l])
        bundle.add(f"layer.{l}.b", model.biases[l])
    return bundle


def model_from_bundle(bundle: TensorBundle) -> Mlp:
    n_layers = int(bundle.meta["n_layers"])
    weights = [bundle.get_matrix(f"layer.{l}.W") for l in range(n_layers)]
    biases = [bundle.get_matrix(f"layer.{l}.b") for l in range(n_layers)]
    widths = [weights[0].shape[0]] + [w.shape[1] for w in weights]
    return Mlp(MlpSpec(tuple(widths)), weights, biases)


class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.cfg = cfg

    def step(self, params, grads):
        self.t += 1
        cfg = self.cfg
        for i, (p, g) in enumerate(zip(params, grads)):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            m_hat = self.m[i] / (1 - cfg.beta1**self.t)
            v_hat = self.v[i] / (1 - cfg.beta2**self.t)
            p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def pretrain(spec: MlpSpec, data: Dataset, cfg: TrainConfig):
    """Train a fresh model on the pretraining split; returns (model, accuracy)."""
    model = Mlp.init_random(spec, cfg.seed)
    opt = _Adam([w.shape for w in model.weights] + [b.shape for b in model.biases],
                replace(cfg, lr=cfg.pretrain_lr))
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(data))
        for start in range(0, len(data), cfg.pretrain_batch_size):
            idx = order[start : start + cfg.pretrain_batch_size]
            loss, gw, gb, _ = model.loss_and_grads(data.images[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(step)
            opt.step(model.weights + model.biases, gw + gb)
            step += 1
    return model, model.accuracy(data)


def collect_stats(
    model: Mlp, layer_ids, samples: Dataset, n_total: int
) -> dict[int, LayerStats]:
    """Per-layer statistics over the sample set: layer inputs, per-sample
    output gradients of the summed loss, and the exact weight gradients."""
    layer_ids = list(layer_ids)
    for lid in layer_ids:
        if not 0 <= lid < model.spec.n_layers:
            raise ValueError(f"unknown layer id {lid}")
    _, _, _, captured = model.loss_and_grads(
        samples.images, samples.labels, reduction="sum", capture=set(layer_ids)
    )
    out = {}
    for lid in layer_ids:
        z_rows, gy_rows = captured[lid]
        d1, d2 = model.layer_dims(lid)
        acc = accumulate_batch(StatsAccumulator.empty(d1, d2), z_rows, gy_rows)
        out[lid] = finalize(acc, n_total=n_total)
    return out


def init_results_for_mode(
    model: Mlp, mode: InitMode, cfg: TrainConfig, stats: dict[int, LayerStats] | None
) -> dict[int, InitResult]:
    """Run the initializer for every layer of the model."""
    out = {}
    for lid in range(model.spec.n_layers):
        d1, d2 = model.layer_dims(lid)
        r = min(cfg.rank, min(d1, d2))
        if mode in (InitMode.PISSA, InitMode.MILORA):
            stats_l = _placeholder_stats(d1, d2)
        else:
            if stats is None or lid not in stats:
                raise ValueError(f"mode {mode} needs statistics for layer {lid}")
            stats_l = stats[lid]
        gcfg = GuidanceConfig(
            rank=r,
            n_total=stats_l.n_total,
            damping_scale=cfg.damping_scale,
            mode=mode,
            grad_step_scale=cfg.grad_step_scale,
            seed=cfg.seed,
        )
        out[lid] = compute_init(stats_l, gcfg, w0=model.weights[lid])
    return out


def _placeholder_stats(d1, d2):
    # weight-SVD modes ignore the statistics; give them well-formed identities
    return LayerStats(
        g=np.zeros((d1, d2)), zf=np.eye(d1), yf=np.eye(d2), sample_count=1, n_total=1
    )


@dataclass
class Metrics:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_accs: list[float] = field(default_factory=list)
    step0_loss: float = float("nan")
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")
    init_seconds: float = 0.0
    train_seconds: float = 0.0

    def csv_lines(self) -> list[str]:
        acc_at = dict(zip(self.eval_steps, self.eval_accs))
        lines = ["step,loss,grad_norm,accuracy"]
        for s, loss, gn in zip(self.steps, self.losses, self.grad_norms):
            acc = f"{acc_at[s]:.6f}" if s in acc_at else ""
            lines.append(f"{s},{loss:.12g},{gn:.12g},{acc}")
        return lines

    def report_items(self) -> dict:
        return {
            "step0_loss": self.step0_loss,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "steps": self.steps[-1] + 1 if self.steps else 0,
        }


def finetune(
    model: Mlp,
    adapters: list[LoraAdapter],
    data: Dataset,
    cfg: TrainConfig,
    eval_data: Dataset | None = None,
) -> Metrics:
    """Train only the adapter parameters; base weights are never touched.

    Records per-step training loss and adapter gradient norm, periodic
    accuracy on ``eval_data``, and the loss over the full fine-tune set at
    step 0 (before any update).
    """
    for ad in adapters:
        if not 0 <= ad.layer_id < model.spec.n_layers:
            raise ValueError(f"adapter targets unknown layer {ad.layer_id}")
    metrics = Metrics()
    eval_set = None
    if eval_data is not None and len(eval_data) > 0:
        eval_set = eval_data.subset(slice(0, cfg.eval_max)) if cfg.eval_max else eval_data

    metrics.step0_loss = model.loss(data.images, data.labels, adapters)
    if eval_set is not None:
        metrics.eval_steps.append(0)
        metrics.eval_accs.append(model.accuracy(eval_set, adapters))

    params, shapes = [], []
    for ad in adapters:
        params.append(ad.b)
        shapes.append(ad.b.shape)
        if ad.train_a:
            params.append(ad.a)
            shapes.append(ad.a.shape)
    opt = _Adam(shapes, cfg)

    t0 = time.perf_counter()
    step = 0
    last_loss = metrics.step0_loss
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gw, _, _ = model.loss_and_grads(data.images[idx], data.labels[idx], adapters)
            if not np.isfinite(loss):
                raise TrainingDiverged(step)
            grads = []
            sq_norm = 0.0
            for ad in adapters:
                g_eff = gw[ad.layer_id]
                gb = ad.scale * (ad.a.T @ g_eff)
                grads.append(gb)
                sq_norm += float(np.sum(gb * gb))
                if ad.train_a:
                    ga = ad.scale * (g_eff @ ad.b.T)
                    grads.append(ga)
                    sq_norm += float(np.sum(ga * ga))
            opt.step(params, grads)
            metrics.steps.append(step)
            metrics.losses.append(loss)
            metrics.grad_norms.append(np.sqrt(sq_norm))
            last_loss = loss
            step += 1
            if eval_set is not None and cfg.eval_every and step % cfg.eval_every == 0:
                metrics.eval_steps.append(step)
                metrics.eval_accs.append(model.accuracy(eval_set, adapters))
    metrics.train_seconds = time.perf_counter() - t0
    metrics.final_loss = last_loss
    if eval_set is not None and (not metrics.eval_steps or metrics.eval_steps[-1] != step):
        metrics.eval_steps.append(step)
        metrics.eval_accs.append(model.accuracy(eval_set, adapters))
    metrics.final_accuracy = metrics.eval_accs[-1] if metrics.eval_accs else float("nan")
    return metrics


def build_adapters_for_mode(
    model: Mlp, mode_name_str: str, cfg: TrainConfig, finetune_data: Dataset
):
    """Construct adapters for a mode, timing the full initialization path
    (statistics collection included when the mode consumes them)."""
    t0 = time.perf_counter()
    if mode_name_str == "default":
        adapters = default_adapters(model, cfg.rank, cfg.alpha, seed=cfg.seed + 1)
        return adapters, time.perf_counter() - t0
    mode = parse_mode(mode_name_str)
    stats = None
    if mode not in (InitMode.PISSA, InitMode.MILORA):
        n = min(cfg.stats_samples, len(finetune_data))
        stats = collect_stats(
            model,
            range(model.spec.n_layers),
            finetune_data.subset(slice(0, n)),
            n_total=len(finetune_data),
        )
    results = init_results_for_mode(model, mode, cfg, stats)
    adapters = adapters_from_init(results, cfg.alpha)
    return adapters, time.perf_counter() - t0


@dataclass
class CompareRow:
    mode: str
    rank: int
    status: str
    step0_loss: float
    final_loss: float
    final_accuracy: float
    init_seconds: float
    train_seconds: float

    @property
    def total_seconds(self):
        return self.init_seconds + self.train_seconds


def compare_inits(
    modes, cfg: TrainConfig, pretrain_data: Dataset, finetune_data: Dataset,
    eval_data: Dataset, ranks=None, spec: MlpSpec | None = None,
) -> list[CompareRow]:
    """One fine-tune run per (mode, rank) from a shared pretrained checkpoint.

    Failures in one mode do not abort the table; the row carries the error
    in its status column instead.
    """
    if not modes:
        raise ValueError("no modes given")
    ranks = list(ranks) if ranks else [cfg.rank]
    if spec is None:
        spec = MlpSpec((pretrain_data.images.shape[1],) + MlpSpec().widths[1:])
    model, _ = pretrain(spec, pretrain_data, cfg)
    frozen = [w.copy() for w in model.weights]
    rows = []
    for rank in ranks:
        run_cfg = replace(cfg, rank=rank)
        for mode in modes:
            try:
                adapters, init_s = build_adapters_for_mode(model, mode, run_cfg, finetune_data)
                metrics = finetune(model, adapters, finetune_data, run_cfg, eval_data)
                rows.append(
                    CompareRow(
                        mode=mode,
                        rank=rank,
                        status="ok",
                        step0_loss=metrics.step0_loss,
                        final_loss=metrics.final_loss,
                        final_accuracy=metrics.final_accuracy,
                        init_seconds=init_s,
                        train_seconds=metrics.train_seconds,
                    )
                )
            except (ValueError, TrainingDiverged) as exc:
                rows.append(
                    CompareRow(
                        mode=mode, rank=rank, status=f"error: {exc}",
                        step0_loss=float("nan"), final_loss=float("nan"),
                        final_accuracy=float("nan"), init_seconds=0.0, train_seconds=0.0,
                    )
                )
    for w, ref in zip(model.weights, frozen):
        if w.tobytes() != ref.tobytes():
            raise AssertionError("base weights changed during comparison runs")
    return rows
