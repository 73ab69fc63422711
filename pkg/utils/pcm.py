# =====================================================
# utils/pcm.py
# =====================================================

"""
Pseudo composed mapping: the trainable image-to-word network and its losses.

Gradients are hand-derived for this exact graph:

    v_r -> f_M -> S_* -> prompt pool -> frozen text head -> t -> t / ||t|| -> contrastive loss

Only the mapping network's parameters are trainable; the frozen encoders pass
gradients through to the pseudo-token slot and nothing else.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.config import LossConfig
from utils.embedding_store import l2_normalize_rows
from utils.encoders import FrozenEncoders, PromptKind, build_prompt, pool_weights, project, project_vjp
from utils.errors import BatchSizeError, DimensionMismatchError, InvalidInputError
from utils.ptc import PseudoTriplet

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
_GELU_C = np.sqrt(2.0 / np.pi)


# -----------------------------------------------------
# Activations
# -----------------------------------------------------

def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


ACTIVATIONS = {
    "gelu": (_gelu, _gelu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "identity": (lambda x: x, np.ones_like),
}


# -----------------------------------------------------
# Mapping network
# -----------------------------------------------------

@dataclass
class MappingParams:
    """Three affine layers with a smooth nonlinearity between them."""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    activation: str = "gelu"
    generation: int = 0

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @property
    def d(self) -> int:
        return int(self.W1.shape[1])

    @property
    def token_dim(self) -> int:
        return int(self.W3.shape[0])

    def copy(self) -> "MappingParams":
        return MappingParams(*(getattr(self, n).copy() for n in PARAM_NAMES), self.activation, self.generation)

    def bump(self):
        self.generation += 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def astype(self, dtype) -> "MappingParams":
        return MappingParams(*(getattr(self, n).astype(dtype) for n in PARAM_NAMES),
                             self.activation, self.generation)


@dataclass
class ForwardCache:
    generation: int
    X: np.ndarray
    Z1: np.ndarray
    A1: np.ndarray
    Z2: np.ndarray
    A2: np.ndarray


@dataclass
class LossBreakdown:
    l_compose: float = 0.0
    l_align: float = 0.0
    l_total: float = 0.0
    compose_t2i: float = 0.0
    compose_i2t: float = 0.0
    align_t2i: float = 0.0
    align_i2t: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.__dict__.items()}


def init_mapping(d: int, token_dim: int, rng: np.random.Generator, hidden_dim: Optional[int] = None,
                 activation: str = "gelu", dtype=np.float64) -> MappingParams:
    """
    Fan-in scaled Gaussian weights and zero biases.

    Args:
        d: Image embedding dimension
        token_dim: Pseudo-token dimension
        rng: The ``init`` stream
        hidden_dim: Hidden width (defaults to ``d``)
        activation: One of ``gelu``, ``tanh``, ``identity``

    Returns:
        MappingParams
    """
    if d < 1 or token_dim < 1:
        raise InvalidInputError("mapping dimensions must be >= 1")
    if activation not in ACTIVATIONS:
        raise InvalidInputError(f"unknown activation {activation!r}")
    hidden = hidden_dim or d
    shapes = [(hidden, d), (hidden, hidden), (token_dim, hidden)]
    layers = []
    for rows, cols in shapes:
        layers.append((rng.normal(size=(rows, cols)) / np.sqrt(cols)).astype(dtype))
        layers.append(np.zeros(rows, dtype=dtype))
    return MappingParams(*layers, activation=activation)


def map_forward(params: MappingParams, v_r: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """S_* = f_M(v_r) for one vector or a batch of row vectors."""
    X = np.asarray(v_r, dtype=params.W1.dtype)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.d:
        raise DimensionMismatchError(f"mapping expects dimension {params.d}, got {X.shape[1]}")
    act, _ = ACTIVATIONS[params.activation]
    Z1 = X @ params.W1.T + params.b1
    A1 = act(Z1)
    Z2 = A1 @ params.W2.T + params.b2
    A2 = act(Z2)
    S = A2 @ params.W3.T + params.b3
    cache = ForwardCache(params.generation, X, Z1, A1, Z2, A2)
    return (S[0] if single else S), cache


def map_backward(params: MappingParams, cache: ForwardCache, dS: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients of ``sum(dS * S)`` from a forward cache of the same parameters."""
    if cache.generation != params.generation:
        raise InvalidInputError(
            f"stale forward cache (generation {cache.generation}, params at {params.generation})")
    _, act_grad = ACTIVATIONS[params.activation]
    dS = np.atleast_2d(dS)
    grads = {"W3": dS.T @ cache.A2, "b3": dS.sum(axis=0)}
    dZ2 = (dS @ params.W3) * act_grad(cache.Z2)
    grads["W2"] = dZ2.T @ cache.A1
    grads["b2"] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ params.W2) * act_grad(cache.Z1)
    grads["W1"] = dZ1.T @ cache.X
    grads["b1"] = dZ1.sum(axis=0)
    return grads


# -----------------------------------------------------
# Contrastive terms
# -----------------------------------------------------

def _logsumexp_rows(Z: np.ndarray) -> np.ndarray:
    zmax = Z.max(axis=1, keepdims=True)
    return (zmax + np.log(np.exp(Z - zmax).sum(axis=1, keepdims=True)))[:, 0]


def contrastive_pair_loss(A_hat: np.ndarray, B_hat: np.ndarray, tau: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    -1/m sum_i log softmax_j(tau * A_i . B_j)[i] with analytic gradients.

    Args:
        A_hat: m unit rows (queries of the softmax)
        B_hat: m unit rows (keys)
        tau: Positive temperature multiplier

    Returns:
        tuple: (loss, dL/dA_hat, dL/dB_hat)
    """
    if tau <= 0:
        raise InvalidInputError(f"tau must be > 0, got {tau}")
    A_hat = np.atleast_2d(A_hat)
    B_hat = np.atleast_2d(B_hat)
    if A_hat.shape != B_hat.shape:
        raise DimensionMismatchError(f"contrastive inputs differ: {A_hat.shape} vs {B_hat.shape}")
    m = A_hat.shape[0]
    if m < 1:
        raise BatchSizeError("contrastive loss needs at least one pair")
    for name, M in (("A_hat", A_hat), ("B_hat", B_hat)):
        if np.max(np.abs(np.linalg.norm(M, axis=1) - 1.0)) > 1e-6:
            raise InvalidInputError(f"{name} rows must be unit-norm")

    Z = tau * (A_hat @ B_hat.T)
    lse = _logsumexp_rows(Z)
    loss = float(np.mean(lse - np.diag(Z)))
    P = np.exp(Z - lse[:, None])
    dZ = (P - np.eye(m)) / m
    return max(loss, 0.0), tau * dZ @ B_hat, tau * dZ.T @ A_hat


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    return (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norms


def _symmetric_loss(t: np.ndarray, v: np.ndarray, tau: float) -> Tuple[float, float, np.ndarray]:
    """L_t2i(t, v) + L_i2t(t, v); returns (t2i, i2t, dL/dt) with ``v`` held fixed."""
    t_hat, t_norm = l2_normalize_rows(t)
    v_hat, _ = l2_normalize_rows(v)
    t2i, dt_a, _ = contrastive_pair_loss(t_hat, v_hat, tau)
    i2t, _, dt_b = contrastive_pair_loss(v_hat, t_hat, tau)
    return t2i, i2t, _normalize_backward(t_hat, t_norm, dt_a + dt_b)


# -----------------------------------------------------
# Prompt pooling with a trainable slot
# -----------------------------------------------------

def _pool_parts(kind: PromptKind, token_lists: Sequence[Sequence[int]], encoders: FrozenEncoders,
                connective: str = ",") -> Tuple[np.ndarray, np.ndarray]:
    """
    Split each prompt's pooled input into a frozen part and a slot weight.

    pooled_i = fixed_i + slot_weight_i * S_i
    """
    fixed, slot_w = [], []
    for tokens in token_lists:
        seq = build_prompt(kind, None, tokens, encoders.vocab, connective)
        w = pool_weights(len(seq), encoders.text)
        mask = np.ones(len(seq), dtype=bool)
        mask[seq.slot_index] = False
        fixed.append(w[mask] @ seq.token_embeddings[mask])
        slot_w.append(w[seq.slot_index])
    return np.stack(fixed), np.asarray(slot_w)


def _slot_terms(S: np.ndarray, fixed: np.ndarray, slot_w: np.ndarray, v: np.ndarray,
                encoders: FrozenEncoders, tau: float) -> Tuple[float, float, np.ndarray]:
    if S.shape[1] != encoders.token_dim:
        raise DimensionMismatchError(f"pseudo tokens have dimension {S.shape[1]}, vocabulary {encoders.token_dim}")
    t, h = project(fixed + slot_w[:, None] * S, encoders.text)
    t2i, i2t, dt = _symmetric_loss(t, v, tau)
    dS = slot_w[:, None] * project_vjp(h, dt, encoders.text)
    return t2i, i2t, dS


def compose_terms(S: np.ndarray, triplets: Sequence[PseudoTriplet], encoders: FrozenEncoders,
                  config: LossConfig) -> Tuple[float, float, np.ndarray]:
    """Compose loss on given pseudo tokens; returns (t2i, i2t, dL/dS)."""
    fixed, slot_w = _pool_parts(PromptKind.COMPOSE, [t.caption_tokens for t in triplets], encoders,
                                config.connective)
    targets = np.stack([t.target for t in triplets])
    return _slot_terms(S, fixed, slot_w, targets, encoders, config.tau)


def align_terms(S: np.ndarray, paired: np.ndarray, encoders: FrozenEncoders,
                config: LossConfig) -> Tuple[float, float, np.ndarray]:
    """Alignment loss of ``a photo of [*]`` prompts against ``paired`` image rows."""
    fixed, slot_w = _pool_parts(PromptKind.GLOBAL, [[]] * S.shape[0], encoders)
    return _slot_terms(S, fixed, slot_w, paired, encoders, config.tau)


def _check_batch(n: int, what: str):
    if n < 2:
        raise BatchSizeError(f"{what} needs a batch of at least 2, got {n}")


def compose_loss(params: MappingParams, triplets: Sequence[PseudoTriplet], encoders: FrozenEncoders,
                 config: Optional[LossConfig] = None) -> Tuple[float, np.ndarray]:
    """
    Cross-modal compose loss of a triplet batch.

    Returns:
        tuple: (L_t2i + L_i2t, dL/dS_* per triplet)
    """
    config = config or LossConfig()
    _check_batch(len(triplets), "compose loss")
    S, _ = map_forward(params, np.stack([t.reference for t in triplets]))
    t2i, i2t, dS = compose_terms(S, triplets, encoders, config)
    return t2i + i2t, dS


def _align_pairs(triplets_or_refs, config: LossConfig, targets: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    if len(triplets_or_refs) and isinstance(triplets_or_refs[0], PseudoTriplet):
        refs = np.stack([t.reference for t in triplets_or_refs])
        targets = np.stack([t.target for t in triplets_or_refs])
    else:
        refs = np.atleast_2d(np.asarray(triplets_or_refs))
    if config.align_target == "target":
        if targets is None:
            raise InvalidInputError("align_target='target' needs target embeddings")
        return refs, np.atleast_2d(targets)
    return refs, refs


def align_loss(params: MappingParams, references: Union[Sequence[PseudoTriplet], np.ndarray],
               encoders: FrozenEncoders, config: Optional[LossConfig] = None,
               targets: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """
    Cross-modal alignment loss; captions play no part.

    Returns:
        tuple: (L_t2i + L_i2t, dL/dS_r* per reference)
    """
    config = config or LossConfig()
    _check_batch(len(references), "alignment loss")
    refs, paired = _align_pairs(references, config, targets)
    S, _ = map_forward(params, refs)
    t2i, i2t, dS = align_terms(S, paired, encoders, config)
    return t2i + i2t, dS


def total_loss_and_grads(params: MappingParams, triplets: Sequence[PseudoTriplet], encoders: FrozenEncoders,
                         config: Optional[LossConfig] = None) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """
    L = L_compose + L_align and its gradient w.r.t. every mapping parameter.

    Disabled terms (``use_compose`` / ``use_align``) contribute zero loss and gradient.
    """
    config = config or LossConfig()
    _check_batch(len(triplets), "total loss")
    refs, paired = _align_pairs(triplets, config, None)
    S, cache = map_forward(params, refs)
    breakdown = LossBreakdown()
    dS = np.zeros_like(S)
    if config.use_compose:
        t2i, i2t, d_compose = compose_terms(S, triplets, encoders, config)
        breakdown.compose_t2i, breakdown.compose_i2t = t2i, i2t
        breakdown.l_compose = t2i + i2t
        dS += d_compose
    if config.use_align:
        t2i, i2t, d_align = align_terms(S, paired, encoders, config)
        breakdown.align_t2i, breakdown.align_i2t = t2i, i2t
        breakdown.l_align = t2i + i2t
        dS += d_align
    breakdown.l_total = breakdown.l_compose + breakdown.l_align
    return breakdown, map_backward(params, cache, dS)


def grad_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


# -----------------------------------------------------
# Finite-difference verification
# -----------------------------------------------------

@dataclass
class GradCheckReport:
    loss: str
    h: float
    tolerance: float
    n_coords: int
    max_rel_err: float
    mean_rel_err: float
    worst: Tuple[str, int] = ("", -1)
    passed: bool = False
    errors: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        return {
            "loss": self.loss, "h": self.h, "tolerance": self.tolerance, "n_coords": self.n_coords,
            "max_rel_err": self.max_rel_err, "mean_rel_err": self.mean_rel_err,
            "worst_param": self.worst[0], "worst_index": self.worst[1], "passed": self.passed,
        }


def _loss_value(params: MappingParams, triplets, encoders, config: LossConfig, which: str) -> float:
    if which == "compose":
        return compose_loss(params, triplets, encoders, config)[0]
    if which == "align":
        return align_loss(params, triplets, encoders, config)[0]
    return total_loss_and_grads(params, triplets, encoders, config)[0].l_total


def analytic_grads(params: MappingParams, triplets, encoders, config: LossConfig, which: str = "total"):
    if which == "total":
        return total_loss_and_grads(params, triplets, encoders, config)[1]
    single = replace(config, use_compose=which == "compose", use_align=which == "align")
    return total_loss_and_grads(params, triplets, encoders, single)[1]


def finite_diff_check(params: MappingParams, batch: Sequence[PseudoTriplet], encoders: FrozenEncoders,
                      config: Optional[LossConfig] = None, h: float = 1e-5, tolerance: float = 1e-5,
                      which: str = "total", max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      grads: Optional[Dict[str, np.ndarray]] = None, scale_floor: float = 1e-3) -> GradCheckReport:
    """
    Compare analytic gradients with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, scale_floor)``.

    Args:
        params: Mapping parameters (float64)
        batch: Pseudo triplets
        encoders: Frozen encoders
        config: Loss settings (tau, switches)
        h: Central-difference step
        tolerance: Pass threshold on the maximum relative error
        which: ``total``, ``compose`` or ``align``
        max_coords: Check a random subset of at least 200 coordinates (or all of them, if fewer)
        rng: Stream for the subset draw
        grads: Analytic gradients to test (computed when omitted)

    Returns:
        GradCheckReport
    """
    config = config or LossConfig()
    if params.W1.dtype != np.float64:
        raise InvalidInputError("finite-difference checks need float64 parameters")
    grads = grads if grads is not None else analytic_grads(params, batch, encoders, config, which)

    coords = [(name, idx) for name in PARAM_NAMES for idx in range(getattr(params, name).size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=min(len(coords), max(max_coords, 200)), replace=False)
        coords = [coords[i] for i in sorted(pick)]

    shifted = params.copy()
    errors, worst, worst_err = [], ("", -1), -1.0
    for name, idx in coords:
        arr = getattr(shifted, name).reshape(-1)
        original = arr[idx]
        arr[idx] = original + h
        shifted.bump()
        up = _loss_value(shifted, batch, encoders, config, which)
        arr[idx] = original - h
        shifted.bump()
        down = _loss_value(shifted, batch, encoders, config, which)
        arr[idx] = original
        shifted.bump()
        numeric = (up - down) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), scale_floor)
        errors.append(err)
        if err > worst_err:
            worst_err, worst = err, (name, idx)

    max_err = max(errors) if errors else 0.0
    report = GradCheckReport(
        loss=which, h=h, tolerance=tolerance, n_coords=len(coords), max_rel_err=max_err,
        mean_rel_err=float(np.mean(errors)) if errors else 0.0, worst=worst,
        passed=bool(max_err <= tolerance), errors=errors,
    )
    logger.info(f"Gradient check ({which}, h={h:g}): max rel err {max_err:.3e} over {len(coords)} coords "
                f"-> {'PASS' if report.passed else 'FAIL'}")
    return report
