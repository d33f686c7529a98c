"""Per-client disentangled network.

Three Gaussian encoders map the shared covariates, the private covariates
and the full covariate vector to latents ``z_s``, ``z_p`` and ``z_ref``.
Two prediction branches then run side by side::

    s_0 = z_s                     s_l = F_s[l](s_{l-1})
    p_1 = F_p[1]([z_p | z_s])     p_l = F_p[l]([p_{l-1} | s_{l-1}])

and two heads read ``[p_L | s_L]`` to produce ``mu0`` and ``mu1``.

The shared branch never sees specific-branch values, so its parameters have
the same shapes on every client and can be averaged by the server.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import ClientDataset
from .numkernel import (
    BCE_EPS,
    Activation,
    LayerCache,
    LayerGrad,
    LayerParams,
    ShapeError,
    bce_loss,
    flatten_layers,
    kl_diag_gaussian,
    kl_diag_gaussian_grad,
    DiagGaussian,
    layer_backward,
    layer_forward,
    mlp_backward,
    mlp_forward,
    sgd_update,
    unflatten_into,
)

CHECKPOINT_VERSION = 1
LOGVAR_MIN = -20.0
LOGVAR_MAX = 20.0

GROUPS = (
    "enc_shared",
    "enc_private",
    "enc_ref",
    "shared_branch",
    "specific_branch",
    "head_mu0",
    "head_mu1",
)
SHARED_BRANCH = ("shared_branch",)
SHARED_WITH_ENCODER = ("enc_shared", "shared_branch")


class OutcomeKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class ModelHyperParams:
    z_dim: int = 8
    widths: tuple[int, ...] = (32, 32)  # one entry per branch layer
    encoder_hidden: tuple[int, ...] = (32,)
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "encoder_hidden", tuple(int(w) for w in self.encoder_hidden))
        if self.z_dim < 1:
            raise ValueError("z_dim must be >= 1")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"branch widths must be positive, got {self.widths}")
        if any(w < 1 for w in self.encoder_hidden):
            raise ValueError(f"encoder widths must be positive, got {self.encoder_hidden}")

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outcome_kind"] = self.outcome_kind.value
        d["widths"] = list(self.widths)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d


@dataclass
class DisentangleModel:
    hyper: ModelHyperParams
    d_shared: int
    d_private: int
    params: dict[str, list[LayerParams]]

    @property
    def outcome_kind(self) -> OutcomeKind:
        return self.hyper.outcome_kind

    def copy(self) -> "DisentangleModel":
        return DisentangleModel(
            self.hyper,
            self.d_shared,
            self.d_private,
            {g: [layer.copy() for layer in layers] for g, layers in self.params.items()},
        )

    def flat(self, groups: Sequence[str] = GROUPS) -> np.ndarray:
        return np.concatenate([flatten_layers(self.params[g]) for g in groups])

    def set_flat(self, vector: np.ndarray, groups: Sequence[str] = GROUPS) -> None:
        offset = 0
        for g in groups:
            n = sum(layer.weight.size + layer.bias.size for layer in self.params[g])
            unflatten_into(self.params[g], vector[offset : offset + n])
            offset += n
        if offset != vector.size:
            raise ShapeError(f"flat vector has {vector.size} entries, groups need {offset}")

    def shared_flat(self, groups: Sequence[str] = SHARED_BRANCH) -> np.ndarray:
        return self.flat(groups)


@dataclass
class LossBreakdown:
    encoder_kl: float
    outcome: float
    proximal: float
    reference: float
    total: float
    lam_kl: float
    lam_prox: float


def _init_layer(rng: np.random.Generator, n_in: int, n_out: int, act: Activation) -> LayerParams:
    gain = 6.0 if act is Activation.RELU else 3.0
    bound = np.sqrt(gain / max(n_in, 1))
    return LayerParams(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), act)


def _init_mlp(rng, n_in: int, hidden: Sequence[int], n_out: int, out_act: Activation):
    layers = []
    width = n_in
    for h in hidden:
        layers.append(_init_layer(rng, width, h, Activation.RELU))
        width = h
    layers.append(_init_layer(rng, width, n_out, out_act))
    return layers


def init_model(d_shared: int, d_private: int, hyper: ModelHyperParams, seed: int) -> DisentangleModel:
    """Fresh model for one client.

    Each parameter group draws from its own ``(seed, group)`` stream, so two
    clients initialised with the same seed get identical shared-branch and
    shared-encoder weights even when their private widths differ.
    """
    if d_shared < 1 or d_private < 0:
        raise ValueError(f"invalid input dims: shared {d_shared}, private {d_private}")
    z = hyper.z_dim
    relu = Activation.RELU
    head_act = Activation.SIGMOID if hyper.outcome_kind is OutcomeKind.BINARY else Activation.IDENTITY

    def rng(group: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([int(seed), GROUPS.index(group)]))

    params: dict[str, list[LayerParams]] = {}
    for group, n_in in (
        ("enc_shared", d_shared),
        ("enc_private", d_private),
        ("enc_ref", d_shared + d_private),
    ):
        layers = _init_mlp(rng(group), n_in, hyper.encoder_hidden, 2 * z, Activation.IDENTITY)
        # log-variance rows start at zero: every posterior begins with unit variance
        layers[-1].weight[z:] = 0.0
        params[group] = layers

    r = rng("shared_branch")
    shared, width = [], z
    for w in hyper.widths:
        shared.append(_init_layer(r, width, w, relu))
        width = w
    params["shared_branch"] = shared

    r = rng("specific_branch")
    specific, p_width, s_width = [], 2 * z, 0
    for l, w in enumerate(hyper.widths):
        n_in = p_width if l == 0 else p_width + s_width
        specific.append(_init_layer(r, n_in, w, relu))
        p_width = w
        s_width = hyper.widths[l]
    params["specific_branch"] = specific

    head_in = 2 * hyper.widths[-1]
    params["head_mu0"] = [_init_layer(rng("head_mu0"), head_in, 1, head_act)]
    params["head_mu1"] = [_init_layer(rng("head_mu1"), head_in, 1, head_act)]
    return DisentangleModel(hyper, d_shared, d_private, params)


# --- encoders ---------------------------------------------------------------


class EncodeMode(str, enum.Enum):
    SAMPLE = "sample"
    MEAN = "mean"


def _gaussian_head(out: np.ndarray, z: int) -> tuple[np.ndarray, np.ndarray]:
    return out[..., :z], np.clip(out[..., z:], LOGVAR_MIN, LOGVAR_MAX)


def _check_inputs(model: DisentangleModel, xs: np.ndarray, xp: np.ndarray) -> None:
    if xs.shape[-1] != model.d_shared:
        raise ShapeError(f"x_shared has width {xs.shape[-1]}, model expects {model.d_shared}")
    if xp.shape[-1] != model.d_private:
        raise ShapeError(f"x_private has width {xp.shape[-1]}, model expects {model.d_private}")


def encode(
    model: DisentangleModel,
    x_shared,
    x_private,
    mode: EncodeMode = EncodeMode.MEAN,
    rng: np.random.Generator | None = None,
):
    """Latents ``(z_s, z_p, z_ref)`` and their three Gaussians.

    SAMPLE mode draws ``mean + exp(log_var / 2) * eps`` from ``rng``.
    """
    xs = np.asarray(x_shared, dtype=np.float64)
    xp = np.asarray(x_private, dtype=np.float64)
    _check_inputs(model, xs, xp)
    mode = EncodeMode(mode)
    if mode is EncodeMode.SAMPLE and rng is None:
        raise ValueError("SAMPLE mode needs an rng")
    z = model.hyper.z_dim
    gaussians = []
    latents = []
    for group, x in (
        ("enc_shared", xs),
        ("enc_private", xp),
        ("enc_ref", np.concatenate([xs, xp], axis=-1)),
    ):
        out, _ = mlp_forward(model.params[group], x)
        mean, log_var = _gaussian_head(out, z)
        gaussians.append(DiagGaussian(mean, log_var))
        if mode is EncodeMode.MEAN:
            latents.append(mean.copy())
        else:
            latents.append(mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape))
    return latents[0], latents[1], latents[2], tuple(gaussians)


def encoder_loss(gaussians: Sequence[DiagGaussian]) -> float:
    """KL(shared || ref) + KL(private || ref) for a single sample's Gaussians."""
    q_s, q_p, q_ref = gaussians
    return kl_diag_gaussian(q_s, q_ref) + kl_diag_gaussian(q_p, q_ref)


# --- prediction branches ----------------------------------------------------


@dataclass
class BranchCache:
    shared: list[LayerCache]
    specific: list[LayerCache]
    head0: LayerCache
    head1: LayerCache
    shared_trace: list[np.ndarray] = field(default_factory=list)  # s_0 .. s_L


def _branches_forward(model: DisentangleModel, z_s: np.ndarray, z_p: np.ndarray):
    shared_layers = model.params["shared_branch"]
    specific_layers = model.params["specific_branch"]
    s = z_s
    s_trace = [s]
    shared_caches, specific_caches = [], []
    p = None
    for l, (fs, fp) in enumerate(zip(shared_layers, specific_layers)):
        inp = np.hstack([z_p, z_s]) if l == 0 else np.hstack([p, s])
        if inp.shape[1] != fp.n_in:
            raise ShapeError(f"specific layer {l + 1}: expected width {fp.n_in}, got {inp.shape[1]}")
        p, c_p = layer_forward(fp, inp)
        if s.shape[1] != fs.n_in:
            raise ShapeError(f"shared layer {l + 1}: expected width {fs.n_in}, got {s.shape[1]}")
        s, c_s = layer_forward(fs, s)
        specific_caches.append(c_p)
        shared_caches.append(c_s)
        s_trace.append(s)
    h = np.hstack([p, s])
    mu0, c0 = layer_forward(model.params["head_mu0"][0], h)
    mu1, c1 = layer_forward(model.params["head_mu1"][0], h)
    return mu0[:, 0], mu1[:, 0], BranchCache(shared_caches, specific_caches, c0, c1, s_trace)


def _branches_backward(model: DisentangleModel, cache: BranchCache, d_mu0, d_mu1):
    """Gradients for branch/head parameters and for the two latent inputs."""
    shared_layers = model.params["shared_branch"]
    specific_layers = model.params["specific_branch"]
    g0, dh0 = layer_backward(model.params["head_mu0"][0], cache.head0, d_mu0[:, None])
    g1, dh1 = layer_backward(model.params["head_mu1"][0], cache.head1, d_mu1[:, None])
    dh = dh0 + dh1
    w_last = specific_layers[-1].n_out
    dp = dh[:, :w_last]
    ds = dh[:, w_last:]
    n_layers = len(shared_layers)
    shared_grads: list[LayerGrad] = [None] * n_layers  # type: ignore[list-item]
    specific_grads: list[LayerGrad] = [None] * n_layers  # type: ignore[list-item]
    dz_s = dz_p = None
    for l in reversed(range(n_layers)):
        specific_grads[l], d_in = layer_backward(specific_layers[l], cache.specific[l], dp)
        shared_grads[l], ds_prev = layer_backward(shared_layers[l], cache.shared[l], ds)
        if l == 0:
            z = model.hyper.z_dim
            dz_p = d_in[:, :z]
            dz_s = d_in[:, z:] + ds_prev
        else:
            w_prev = specific_layers[l - 1].n_out
            dp = d_in[:, :w_prev]
            ds = d_in[:, w_prev:] + ds_prev
    grads = {
        "shared_branch": shared_grads,
        "specific_branch": specific_grads,
        "head_mu0": [g0],
        "head_mu1": [g1],
    }
    return grads, dz_s, dz_p


def predict_pos(model: DisentangleModel, z_s, z_p):
    """``(mu0, mu1, cache)`` for one latent pair or a batch of them."""
    zs = np.asarray(z_s, dtype=np.float64)
    zp = np.asarray(z_p, dtype=np.float64)
    single = zs.ndim == 1
    zs2 = np.atleast_2d(zs)
    zp2 = np.atleast_2d(zp)
    z = model.hyper.z_dim
    if zs2.shape[1] != z or zp2.shape[1] != z:
        raise ShapeError(f"latents must have width {z}, got {zs2.shape[1]} and {zp2.shape[1]}")
    mu0, mu1, cache = _branches_forward(model, zs2, zp2)
    if single:
        return float(mu0[0]), float(mu1[0]), cache
    return mu0, mu1, cache


def estimate_cate(model: DisentangleModel, x_shared, x_private):
    """``mu1 - mu0`` under mean-mode encoding."""
    z_s, z_p, _, _ = encode(model, x_shared, x_private, EncodeMode.MEAN)
    mu0, mu1, _ = predict_pos(model, z_s, z_p)
    return mu1 - mu0


# --- local objective --------------------------------------------------------


def _factual_loss(model, mu0, mu1, w, y, literal_sign: bool):
    """Treatment-masked outcome loss and its gradients w.r.t. ``mu0``/``mu1``."""
    n = y.shape[0]
    control_sign = -1.0 if literal_sign else 1.0
    if model.outcome_kind is OutcomeKind.BINARY:
        # bce_loss returns d(mean)/dp; scale by n for per-sample derivatives
        per1, d1 = _bce_terms(mu1, y)
        per0, d0 = _bce_terms(mu0, y)
    else:
        per1, d1 = (mu1 - y) ** 2, 2.0 * (mu1 - y)
        per0, d0 = (mu0 - y) ** 2, 2.0 * (mu0 - y)
    loss = float(np.mean(w * per1 + control_sign * (1.0 - w) * per0))
    return loss, control_sign * (1.0 - w) * d0 / n, w * d1 / n


def _bce_terms(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clipped = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per = -(y * np.log(clipped) + (1.0 - y) * np.log1p(-clipped))
    _, grad = bce_loss(p, y)
    return per, grad * p.size


@dataclass
class LatentNoise:
    """Standard-normal draws for the reparameterised latents, one row per sample."""

    shared: np.ndarray
    private: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, z_dim: int) -> "LatentNoise":
        return cls(rng.standard_normal((n, z_dim)), rng.standard_normal((n, z_dim)))


def local_objective(
    model: DisentangleModel,
    batch: ClientDataset,
    server_shared: np.ndarray,
    lam_kl: float = 0.1,
    lam_prox: float = 0.01,
    noise: LatentNoise | None = None,
    shared_groups: Sequence[str] = SHARED_BRANCH,
    lam_ref: float = 1.0,
    literal_sign: bool = False,
    lam_outcome: float = 1.0,
) -> tuple[LossBreakdown, dict[str, list[LayerGrad]]]:
    """Composite local loss and its analytic gradient for every parameter group.

    ``total = lam_outcome * outcome + lam_kl * encoder_kl + lam_prox * ||w_shared - server_shared||^2``.
    The reference encoder receives gradient only from an auxiliary factual loss
    (``reference``) computed by passing ``z_ref`` through a frozen copy of the
    branches from its posterior mean; the KL target is treated as constant.
    Without ``noise`` the shared and private latents are the encoder means.
    """
    if batch.n == 0:
        raise ValueError("empty batch")
    if batch.treatment is None or batch.outcome is None:
        raise ValueError("batch needs treatments and observed outcomes")
    local_shared = model.flat(shared_groups)
    server_shared = np.asarray(server_shared, dtype=np.float64)
    if server_shared.shape != local_shared.shape:
        raise ShapeError(
            f"server parameters have shape {server_shared.shape}, local shared {local_shared.shape}"
        )
    n = batch.n
    z = model.hyper.z_dim
    xs, xp = batch.x_shared, batch.x_private
    _check_inputs(model, xs, xp)
    w, y = batch.treatment, batch.outcome

    enc = {}
    for group, x in (
        ("enc_shared", xs),
        ("enc_private", xp),
        ("enc_ref", np.hstack([xs, xp])),
    ):
        out, caches = mlp_forward(model.params[group], x)
        raw_lv = out[:, z:]
        mean, log_var = out[:, :z], np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
        clip_mask = ((raw_lv >= LOGVAR_MIN) & (raw_lv <= LOGVAR_MAX)).astype(np.float64)
        enc[group] = (mean, log_var, caches, clip_mask)

    def latent(group: str, eps: np.ndarray | None):
        mean, log_var, _, _ = enc[group]
        if eps is None:
            return mean, None
        sd = np.exp(0.5 * log_var)
        return mean + sd * eps, sd

    eps_s = eps_p = None
    if noise is not None:
        eps_s, eps_p = noise.shared, noise.private
    z_s, sd_s = latent("enc_shared", eps_s)
    z_p, sd_p = latent("enc_private", eps_p)
    # the reference path uses the posterior mean: a sampled path would push the
    # reference variance to its floor and blow up the KL gradients
    z_r, sd_r = latent("enc_ref", None)

    # encoder KL against a detached reference
    m_r, lv_r = enc["enc_ref"][0], enc["enc_ref"][1]
    kl_s, dm_s_kl, dlv_s_kl = kl_diag_gaussian_grad(enc["enc_shared"][0], enc["enc_shared"][1], m_r, lv_r)
    kl_p, dm_p_kl, dlv_p_kl = kl_diag_gaussian_grad(enc["enc_private"][0], enc["enc_private"][1], m_r, lv_r)
    encoder_kl = float(np.sum(kl_s + kl_p) / n)

    # outcome path
    mu0, mu1, cache = _branches_forward(model, z_s, z_p)
    outcome, d_mu0, d_mu1 = _factual_loss(model, mu0, mu1, w, y, literal_sign)
    grads, dz_s, dz_p = _branches_backward(model, cache, lam_outcome * d_mu0, lam_outcome * d_mu1)

    # proximal pull on the shared groups
    delta = local_shared - server_shared
    proximal = float(delta @ delta)

    # reference path: frozen branches, gradient reaches enc_ref only
    r0, r1, r_cache = _branches_forward(model, z_r, z_r)
    reference, dr0, dr1 = _factual_loss(model, r0, r1, w, y, literal_sign)
    _, dzr_s, dzr_p = _branches_backward(model, r_cache, dr0, dr1)
    dz_r = lam_ref * (dzr_s + dzr_p)

    def encoder_grads(group, dz, sd, eps, dm_extra, dlv_extra):
        mean, log_var, caches, clip_mask = enc[group]
        dm = dz.copy()
        dlv = np.zeros_like(log_var)
        if eps is not None:
            dlv += dz * eps * 0.5 * sd
        if dm_extra is not None:
            dm += dm_extra
            dlv += dlv_extra
        dout = np.hstack([dm, dlv * clip_mask])
        g, _ = mlp_backward(model.params[group], caches, dout)
        return g

    kl_scale = lam_kl / n
    grads["enc_shared"] = encoder_grads("enc_shared", dz_s, sd_s, eps_s, kl_scale * dm_s_kl, kl_scale * dlv_s_kl)
    grads["enc_private"] = encoder_grads("enc_private", dz_p, sd_p, eps_p, kl_scale * dm_p_kl, kl_scale * dlv_p_kl)
    grads["enc_ref"] = encoder_grads("enc_ref", dz_r, sd_r, None, None, None)

    # add the proximal gradient onto the shared groups
    if lam_prox != 0.0:
        offset = 0
        for group in shared_groups:
            for g in grads[group]:
                nw, nb = g.weight.size, g.bias.size
                g.weight = g.weight + 2.0 * lam_prox * delta[offset : offset + nw].reshape(g.weight.shape)
                offset += nw
                g.bias = g.bias + 2.0 * lam_prox * delta[offset : offset + nb]
                offset += nb

    total = lam_outcome * outcome + lam_kl * encoder_kl + lam_prox * proximal
    breakdown = LossBreakdown(encoder_kl, outcome, proximal, reference, total, lam_kl, lam_prox)
    return breakdown, {g: grads[g] for g in GROUPS}


def flatten_model_grads(grads: dict[str, list[LayerGrad]], groups: Sequence[str] = GROUPS) -> np.ndarray:
    parts = []
    for g in groups:
        for lg in grads[g]:
            parts.append(lg.weight.ravel())
            parts.append(lg.bias)
    return np.concatenate(parts)


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 0.01
    batch_size: int = 64
    lam_kl: float = 0.1
    lam_prox: float = 0.01
    lam_ref: float = 1.0
    sample_latent: bool = True
    literal_sign: bool = False
    lam_outcome: float = 1.0

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.lam_kl, self.lam_prox, self.lam_ref, self.lam_outcome) < 0:
            raise ValueError("loss weights must be >= 0")


def apply_gradients(model: DisentangleModel, grads: dict[str, list[LayerGrad]], eta: float) -> None:
    for g in GROUPS:
        model.params[g] = sgd_update(model.params[g], grads[g], eta)


def train_local_epoch(
    model: DisentangleModel,
    data: ClientDataset,
    server_shared: np.ndarray,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    shared_groups: Sequence[str] = SHARED_BRANCH,
) -> tuple[DisentangleModel, list[LossBreakdown]]:
    """One pass of mini-batch SGD over ``data``; updates ``model`` in place."""
    if data.n == 0:
        raise ValueError("no training data")
    order = rng.permutation(data.n)
    trace = []
    for start in range(0, data.n, opt.batch_size):
        batch = data.subset(order[start : start + opt.batch_size])
        noise = LatentNoise.draw(rng, batch.n, model.hyper.z_dim) if opt.sample_latent else None
        loss, grads = local_objective(
            model,
            batch,
            server_shared,
            opt.lam_kl,
            opt.lam_prox,
            noise=noise,
            shared_groups=shared_groups,
            lam_ref=opt.lam_ref,
            literal_sign=opt.literal_sign,
            lam_outcome=opt.lam_outcome,
        )
        apply_gradients(model, grads, opt.eta)
        trace.append(loss)
    return model, trace


# --- checkpoints ------------------------------------------------------------


def model_to_dict(model: DisentangleModel) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "hyper": model.hyper.to_dict(),
        "d_shared": model.d_shared,
        "d_private": model.d_private,
        "params": {
            g: [
                {
                    "activation": layer.activation.value,
                    "weight_shape": list(layer.weight.shape),
                    "weight": layer.weight.ravel().tolist(),
                    "bias": layer.bias.tolist(),
                }
                for layer in layers
            ]
            for g, layers in model.params.items()
        },
    }


def model_from_dict(doc: dict) -> DisentangleModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    hyper = ModelHyperParams(**doc["hyper"])
    params = {}
    for g in GROUPS:
        params[g] = [
            LayerParams(
                np.array(entry["weight"], dtype=np.float64).reshape(entry["weight_shape"]),
                np.array(entry["bias"], dtype=np.float64),
                Activation(entry["activation"]),
            )
            for entry in doc["params"][g]
        ]
    return DisentangleModel(hyper, int(doc["d_shared"]), int(doc["d_private"]), params)


def save_checkpoint(model: DisentangleModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_checkpoint(path: str | Path) -> DisentangleModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
