"""Conditional WGAN-GP feature generator with cycle and cosine-embedding terms.

Sign convention: :func:`critic_loss` returns the adversarial objective the
critic *maximizes*,

    E[D(x, e)] - E[D(x~, e)] - alpha * E[(||grad_xhat D(xhat, e)||_2 - 1)^2],

and the trainer descends on its negation. The generator and decoder jointly
minimize ``-E[D(x~, e)] + beta * cycle + gamma * embed``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureDataset
from .models import (
    Adam, MlpSpec, Network, NoiseSpec, TrainConfig, backward, forward_cache,
    load_checkpoint, save_checkpoint,
)

log = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, msg, batch=None, dump_path=None):
        super().__init__(msg)
        self.batch = batch
        self.dump_path = dump_path


@dataclass
class GanModel:
    generator: Network
    critic: Network
    decoder: Network
    d_z: int
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def dim_feature(self) -> int:
        return self.generator.spec.layer_sizes[-1]

    @property
    def dim_embedding(self) -> int:
        return self.decoder.spec.layer_sizes[-1]

    def generate(self, noise, embeddings) -> np.ndarray:
        return self.generator(np.hstack([noise, embeddings]))

    def save(self, dir_path) -> None:
        d = Path(dir_path)
        for name in ("generator", "critic", "decoder"):
            save_checkpoint(getattr(self, name), d / name)

    @classmethod
    def load(cls, dir_path, config: TrainConfig | None = None) -> "GanModel":
        d = Path(dir_path)
        g, c, dec = (load_checkpoint(d / n) for n in ("generator", "critic", "decoder"))
        d_z = g.spec.layer_sizes[0] - dec.spec.layer_sizes[-1]
        return cls(g, c, dec, d_z, config or TrainConfig(d_z=d_z))


def make_gan(dim_feature: int, dim_embedding: int, cfg: TrainConfig) -> GanModel:
    h = cfg.hidden
    gen = MlpSpec((cfg.d_z + dim_embedding, h, h, dim_feature), cfg.generator_activation)
    crit = MlpSpec((dim_feature + dim_embedding, h, 1), "leaky_relu")
    dec = MlpSpec((dim_feature, h, h, dim_embedding), "relu")
    ss = np.random.SeedSequence([cfg.seed, 0x6A4]).generate_state(3)
    return GanModel(Network.init(gen, int(ss[0])), Network.init(crit, int(ss[1])),
                    Network.init(dec, int(ss[2])), cfg.d_z, cfg)


@dataclass
class Batch:
    real_features: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    noise: np.ndarray
    # per-row interpolation weights for the gradient penalty; drawn if None
    mix: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.labels)
        for name in ("real_features", "embeddings", "noise"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"batch field {name} has {getattr(self, name).shape[0]} rows, expected {n}")


@dataclass
class PairSet:
    """Index pairs ``(real_row, synth_row)`` within one mini-batch."""

    matched: np.ndarray
    unmatched: np.ndarray


# ---------------------------------------------------------------------------
# Gradient penalty
# ---------------------------------------------------------------------------

def critic_input_grad(critic: Network, x, e) -> np.ndarray:
    """d D(x, e) / d x for every row (the embedding part is dropped)."""
    v = np.hstack([x, e])
    out, cache = forward_cache(critic.params, critic.spec, v)
    _, gv = backward(critic.params, critic.spec, cache, np.ones_like(out))
    return gv[:, : np.shape(x)[1]]


def gradient_penalty(critic: Network, x_hat, e, with_grads: bool = False):
    """Mean of (||d D / d x_hat||_2 - 1)^2 and, optionally, its parameter gradient.

    The critic's hidden activations are piecewise linear, so its input
    gradient is ``W1^T (s1 * W2^T (... w_L))`` with activation slopes ``s``
    locally constant. The penalty gradient is therefore obtained by
    backpropagating through that reverse linear chain; biases receive zero
    gradient and so does ``x_hat`` (almost everywhere).
    """
    spec, params = critic.spec, critic.params
    if spec.layer_sizes[-1] != 1 or spec.output_activation != "none":
        raise ValueError("critic must have a single linear output")
    dx = np.shape(x_hat)[1]
    v = np.hstack([x_hat, e])
    _, (inputs, pre) = forward_cache(params, spec, v)
    slopes = [np.where(a > 0, 1.0, 0.0 if spec.hidden_activation == "relu" else spec.negative_slope)
              for a in pre]
    L = spec.n_layers
    # r[k] = d out / d a_k  (rows), k = 1..L ; r[L] = 1
    r = {L: np.ones((v.shape[0], 1))}
    for k in range(L, 1, -1):
        r[k - 1] = (r[k] @ params[2 * (k - 1)].T) * slopes[k - 2]
    g = r[1] @ params[0].T
    gx = g[:, :dx]
    norms = np.sqrt((gx * gx).sum(axis=1))
    penalty = float(np.mean((norms - 1.0) ** 2))
    if not with_grads:
        return penalty, norms
    B = v.shape[0]
    dg = np.zeros_like(g)
    dg[:, :dx] = (2.0 / B) * ((norms - 1.0) / np.maximum(norms, _NORM_FLOOR))[:, None] * gx
    grads = [np.zeros_like(p) for p in params]
    # g = r1 @ W1^T
    grads[0] = dg.T @ r[1]
    dr = dg @ params[0]
    for k in range(2, L + 1):
        # r[k-1] = (r[k] @ Wk^T) * s_{k-1}
        dpre = dr * slopes[k - 2]
        grads[2 * (k - 1)] = dpre.T @ r[k]
        dr = dpre @ params[2 * (k - 1)]
    return penalty, norms, grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _mix(batch: Batch, rng=None) -> np.ndarray:
    if batch.mix is not None:
        return np.asarray(batch.mix, dtype=np.float64).reshape(-1, 1)
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.uniform(0.0, 1.0, size=(len(batch.labels), 1))


def critic_loss(gan: GanModel, batch: Batch, alpha: float, rng=None, with_grads: bool = False):
    """Adversarial objective maximized by the critic (see module docstring).

    With ``with_grads`` also returns the gradient of that objective w.r.t.
    the critic parameters and the parts ``(w_real, w_fake, penalty)``.
    """
    x = np.asarray(batch.real_features, np.float64)
    e = np.asarray(batch.embeddings, np.float64)
    x_fake = gan.generate(batch.noise, e)
    eps = _mix(batch, rng)
    x_hat = eps * x + (1.0 - eps) * x_fake
    crit = gan.critic
    B = x.shape[0]
    d_real, c_real = forward_cache(crit.params, crit.spec, np.hstack([x, e]))
    d_fake, c_fake = forward_cache(crit.params, crit.spec, np.hstack([x_fake, e]))
    if with_grads:
        penalty, _, g_pen = gradient_penalty(crit, x_hat, e, with_grads=True)
    else:
        penalty, _ = gradient_penalty(crit, x_hat, e)
    value = float(d_real.mean() - d_fake.mean() - alpha * penalty)
    if not with_grads:
        return value
    g_real, _ = backward(crit.params, crit.spec, c_real, np.full_like(d_real, 1.0 / B))
    g_fake, _ = backward(crit.params, crit.spec, c_fake, np.full_like(d_fake, -1.0 / B))
    grads = [a + b - alpha * c for a, b, c in zip(g_real, g_fake, g_pen)]
    return value, grads, (float(d_real.mean()), float(d_fake.mean()), penalty)


def generator_wgan_term(gan: GanModel, batch: Batch) -> float:
    x_fake = gan.generate(batch.noise, batch.embeddings)
    return float(-gan.critic(np.hstack([x_fake, batch.embeddings])).mean())


def _cycle_value_grad(decoded, e, squared: bool):
    diff = decoded - e
    B = diff.shape[0]
    if squared:
        return float((diff * diff).sum(axis=1).mean()), 2.0 * diff / B
    norms = np.sqrt((diff * diff).sum(axis=1))
    return float(norms.mean()), diff / (B * np.maximum(norms, _NORM_FLOOR)[:, None])


def cycle_loss(gan: GanModel, batch: Batch, squared: bool = False) -> float:
    """Mean (unsquared by default) Euclidean distance between decoder(G(z, e)) and e."""
    x_fake = gan.generate(batch.noise, batch.embeddings)
    value, _ = _cycle_value_grad(gan.decoder(x_fake), np.asarray(batch.embeddings, np.float64), squared)
    return value


def _cos_parts(pairs_idx, real, synth):
    a = real[pairs_idx[:, 0]]
    b = synth[pairs_idx[:, 1]]
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine undefined for a zero-norm vector")
    cos = (a * b).sum(axis=1) / (na * nb)
    # d cos / d b
    dcos = a / (na * nb)[:, None] - cos[:, None] * b / (nb * nb)[:, None]
    return cos, dcos


def cosine_embedding_loss(pairs: PairSet, real, synth, with_grad: bool = False):
    """mean_matched(1 - cos) + mean_unmatched(max(0, cos)); gradient is w.r.t. ``synth``."""
    real = np.asarray(real, np.float64)
    synth = np.asarray(synth, np.float64)
    matched = np.asarray(pairs.matched, np.int64).reshape(-1, 2)
    unmatched = np.asarray(pairs.unmatched, np.int64).reshape(-1, 2)
    if matched.shape[0] == 0:
        raise ValueError("cosine embedding loss needs at least one matched pair")
    grad = np.zeros_like(synth)
    cos_m, dcos_m = _cos_parts(matched, real, synth)
    value = float(np.mean(1.0 - cos_m))
    np.add.at(grad, matched[:, 1], -dcos_m / matched.shape[0])
    if unmatched.shape[0]:
        cos_u, dcos_u = _cos_parts(unmatched, real, synth)
        value += float(np.mean(np.maximum(cos_u, 0.0)))
        active = (cos_u > 0).astype(np.float64)[:, None]
        np.add.at(grad, unmatched[:, 1], active * dcos_u / unmatched.shape[0])
    return (value, grad) if with_grad else value


def pair_minibatch(labels_real, labels_synth, seed) -> PairSet:
    """Give every synthesized row one same-class and one other-class real partner.

    ``seed`` may be an int or a ``numpy.random.Generator``. Missing partner
    categories simply produce fewer pairs.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lr_ = np.asarray(labels_real)
    ls = np.asarray(labels_synth)
    if lr_.size == 0 or ls.size == 0:
        raise ValueError("label vectors must be nonempty")
    matched, unmatched = [], []
    for j, y in enumerate(ls):
        same = np.flatnonzero(lr_ == y)
        other = np.flatnonzero(lr_ != y)
        if same.size:
            matched.append((int(same[rng.integers(same.size)]), j))
        if other.size:
            unmatched.append((int(other[rng.integers(other.size)]), j))
    return PairSet(np.array(matched, dtype=np.int64).reshape(-1, 2),
                   np.array(unmatched, dtype=np.int64).reshape(-1, 2))


def generator_loss(gan: GanModel, batch: Batch, beta: float, gamma: float, pairs: PairSet | None = None,
                   squared_cycle: bool = False, cycle_on_real: bool = False, with_grads: bool = False):
    """Total generator objective and its parts.

    Returns ``{"gen_wgan", "cycle", "embed", "total"}``; weighted-off terms
    (weight 0) are not evaluated and reported as 0. With ``with_grads`` also
    returns ``(generator_grads, decoder_grads)``.
    """
    G, C, Dec = gan.generator, gan.critic, gan.decoder
    e = np.asarray(batch.embeddings, np.float64)
    zin = np.hstack([batch.noise, e])
    x_fake, g_cache = forward_cache(G.params, G.spec, zin)
    B = x_fake.shape[0]
    dx = x_fake.shape[1]

    d_out, c_cache = forward_cache(C.params, C.spec, np.hstack([x_fake, e]))
    gen_wgan = float(-d_out.mean())
    _, g_in = backward(C.params, C.spec, c_cache, np.full_like(d_out, -1.0 / B))
    grad_x = g_in[:, :dx].copy()

    cyc, emb = 0.0, 0.0
    dec_grads = [np.zeros_like(p) for p in Dec.params]
    if beta > 0:
        decoded, dec_cache = forward_cache(Dec.params, Dec.spec, x_fake)
        cyc, dcyc = _cycle_value_grad(decoded, e, squared_cycle)
        dec_grads, gx_dec = backward(Dec.params, Dec.spec, dec_cache, beta * dcyc)
        grad_x += gx_dec
        if cycle_on_real:
            dr, dr_cache = forward_cache(Dec.params, Dec.spec, np.asarray(batch.real_features, np.float64))
            _, dcr = _cycle_value_grad(dr, e, squared_cycle)
            g2, _ = backward(Dec.params, Dec.spec, dr_cache, beta * dcr)
            dec_grads = [a + b for a, b in zip(dec_grads, g2)]
    if gamma > 0:
        if pairs is None:
            pairs = pair_minibatch(batch.labels, batch.labels, 0)
        emb, demb = cosine_embedding_loss(pairs, batch.real_features, x_fake, with_grad=True)
        grad_x += gamma * demb
    parts = {"gen_wgan": gen_wgan, "cycle": cyc, "embed": emb, "total": gen_wgan + beta * cyc + gamma * emb}
    if not with_grads:
        return parts
    gen_grads, _ = backward(G.params, G.spec, g_cache, grad_x)
    return parts, gen_grads, dec_grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "critic_loss", "gen_wgan", "cycle", "embed", "total")


@dataclass
class LossHistory:
    rows: list[dict] = field(default_factory=list)
    # mean class-mean distance of generated vs. target features; index 0 is before training
    mean_dist: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def mean_distance(gan: GanModel, embeddings, target_means, per_class: int = 200, seed: int = 0) -> float:
    """Average over classes of ||mean generated feature - target mean||_2."""
    emb = np.asarray(embeddings, np.float64)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((emb.shape[0] * per_class, gan.d_z))
    x = gan.generate(z, np.repeat(emb, per_class, axis=0)).reshape(emb.shape[0], per_class, -1)
    return float(np.linalg.norm(x.mean(axis=1) - np.asarray(target_means), axis=1).mean())


def _check_finite(values: dict, batch: Batch, dump_dir):
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if not bad:
        return
    path = None
    if dump_dir is not None:
        path = Path(dump_dir) / "nonfinite_batch.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, real_features=batch.real_features, labels=batch.labels,
                 embeddings=batch.embeddings, noise=batch.noise)
    raise NonFiniteLossError(f"non-finite loss {bad}; last batch dumped to {path}", batch, path)


def train_gan(ds: FeatureDataset, cfg: TrainConfig, seen_classes=None, monitor=None, dump_dir=None,
              gan: GanModel | None = None):
    """Train the conditional generator on seen-class rows.

    Each generator iteration is preceded by ``critic_steps_per_gen_step``
    critic updates on fresh random mini-batches; an epoch is
    ``ceil(n / batch_size)`` generator iterations. ``monitor`` is an optional
    ``(embeddings, target_means)`` pair whose :func:`mean_distance` is logged
    before training and after every epoch (diagnostic only).
    """
    if ds.n == 0:
        raise ValueError("cannot train a generator on an empty dataset")
    if ds.generated:
        raise ValueError("generator training needs real features")
    if seen_classes is not None and not np.isin(ds.labels, list(seen_classes)).all():
        raise ValueError("training rows must all belong to seen classes")
    gan = gan or make_gan(ds.dim_feature, ds.dim_embedding, cfg)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    noise = NoiseSpec(cfg.d_z)
    feats = ds.features.astype(np.float64)
    emb_table = ds.embeddings.astype(np.float64)
    bs = min(cfg.batch_size, ds.n)
    betas = tuple(cfg.adam_betas)
    opt_c = Adam(gan.critic.params, cfg.lr, betas)
    opt_g = Adam(gan.generator.params, cfg.lr, betas)
    opt_d = Adam(gan.decoder.params, cfg.lr, betas)
    hist = LossHistory()
    if monitor is not None:
        hist.mean_dist.append(mean_distance(gan, *monitor))

    def draw():
        idx = rng.choice(ds.n, size=bs, replace=False)
        y = ds.labels[idx]
        return Batch(feats[idx], y, emb_table[y], noise.sample(bs, rng), rng.uniform(0, 1, bs))

    iters = int(np.ceil(ds.n / bs))
    for epoch in range(1, cfg.epochs + 1):
        acc = {k: 0.0 for k in HISTORY_COLUMNS[1:]}
        for _ in range(iters):
            for _ in range(cfg.critic_steps_per_gen_step):
                batch = draw()
                value, grads, _ = critic_loss(gan, batch, cfg.alpha, with_grads=True)
                _check_finite({"critic_loss": value}, batch, dump_dir)
                gan.critic.params = opt_c.step(gan.critic.params, [-g for g in grads])
            batch = draw()
            pairs = pair_minibatch(batch.labels, batch.labels, rng) if cfg.gamma > 0 else None
            parts, g_gen, g_dec = generator_loss(
                gan, batch, cfg.beta, cfg.gamma, pairs, cfg.cycle_squared, cfg.cycle_on_real, with_grads=True)
            _check_finite(parts, batch, dump_dir)
            gan.generator.params = opt_g.step(gan.generator.params, g_gen)
            if cfg.beta > 0:
                gan.decoder.params = opt_d.step(gan.decoder.params, g_dec)
            acc["critic_loss"] += value
            for k in ("gen_wgan", "cycle", "embed", "total"):
                acc[k] += parts[k]
        row = {"epoch": epoch, **{k: v / iters for k, v in acc.items()}}
        hist.rows.append(row)
        if monitor is not None:
            hist.mean_dist.append(mean_distance(gan, *monitor))
        log.debug("epoch %d %s", epoch, row)
    return gan, hist


def synthesize(gan: GanModel, embeddings, per_class: int, seed: int, class_ids=None) -> FeatureDataset:
    """Generate ``per_class`` features for each requested class.

    Without ``class_ids`` every row of ``embeddings`` is a class and labels
    are row indices. With ``class_ids``, ``embeddings`` is the full class
    table and only those rows are generated, labelled by their class id.
    """
    table = np.asarray(embeddings, np.float64)
    ids = np.arange(table.shape[0]) if class_ids is None else np.asarray(class_ids, np.int64)
    if per_class < 0:
        raise ValueError("per_class must be nonnegative")
    rng = np.random.default_rng([seed, 0x5F7])
    labels = np.repeat(ids, per_class)
    if labels.size:
        x = gan.generate(rng.standard_normal((labels.size, gan.d_z)), table[labels])
    else:
        x = np.zeros((0, gan.dim_feature))
    return FeatureDataset(x, labels, table, generated=True)
