"""Gradient-inversion attacks on intercepted client updates.

Two attackers are provided:

* :func:`april_reconstruct` solves for the ViT embedded sequence ``z0`` in
  closed form from the positional-embedding and query/key/value weight
  gradients, then removes the positional embedding and inverts the patch
  embedding.
* :func:`optimization_attack` starts from a random image and climbs the
  cosine similarity between its parameter gradients and the intercepted
  ones. The similarity is differentiated w.r.t. the image with a
  complex-step Hessian-vector product, so no second-order graph is needed.

The attacker sees the public global parameters, one client's shared
payload, the label, and the defense in use (including R), never the
client's data or mask bits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, unpatchify
from .fl import shield
from .models import VIT_ATTENTION_PARAMS, VitSpec
from .params import ParamSet

log = logging.getLogger(__name__)

COMPLEX_STEP = 1e-20


class DegenerateGradient(ValueError):
    pass


@dataclass
class InterceptedRound:
    params: ParamSet            # public global model w^l
    payload: ParamSet           # what the client shared
    label: int
    defense: dict = field(default_factory=lambda: {"type": "none"})
    meta: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.params.save(d / "params.bin")
        self.payload.save(d / "update.bin")
        meta = {"label": int(self.label), "defense": self.defense, **self.meta}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> InterceptedRound:
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        label = meta.pop("label")
        defense = meta.pop("defense")
        return cls(ParamSet.load(d / "params.bin"), ParamSet.load(d / "update.bin"),
                   label, defense, meta)


def intercept(graph: Graph, params: ParamSet, x, y, defense: dict | None = None, *,
              client=0, round=0, root_seed=0) -> InterceptedRound:
    """Simulate one client sharing a batch-of-one update under ``defense``."""
    defense = defense or {"type": "none"}
    graph.forward(params, x, y)
    grads = graph.backward()
    payload, _ = shield(grads, defense, client=client, round=round, root_seed=root_seed,
                        model_spec=graph.spec)
    return InterceptedRound(params.copy(), payload, int(y), dict(defense),
                            {"client": client, "round": round})


@dataclass
class AttackConfig:
    iterations: int = 2000
    step_size: float = 0.01
    init: str = "uniform"
    decay: float = 0.9
    seed: int = 0
    max_restarts: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.init not in ("uniform", "gray"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class AttackResult:
    image: np.ndarray
    degenerate: bool = False
    iterations: int = 0
    similarity: float = float("nan")
    restarts: int = 0
    rank: int | None = None

    def report(self) -> dict:
        out = asdict(self)
        out.pop("image")
        return out


def cosine_similarity(g1, g2) -> float:
    a = g1.flat() if isinstance(g1, ParamSet) else np.ravel(g1)
    b = g2.flat() if isinstance(g2, ParamSet) else np.ravel(g2)
    if a.shape != b.shape:
        raise ValueError(f"gradient sizes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateGradient("cosine similarity of a zero gradient is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# closed-form attack on the ViT
# ---------------------------------------------------------------------------


def april_reconstruct(intercepted: InterceptedRound, spec: VitSpec, *, clamp=True) -> AttackResult:
    if not isinstance(spec, VitSpec):
        raise ValueError("APRIL needs a ViT target")
    w, g = intercepted.params, intercepted.payload
    # dl/dz0 is observable as the positional-embedding gradient; and since
    # dl/dW = z0^T dl/d(z0 W) for each projection,
    #   z0^T dl/dz0 = sum_W dl/dW W^T  =>  (dl/dz0)^T z0 = sum_W W (dl/dW)^T
    grad_z0 = g["E_pos"]
    rhs = sum(w[name] @ g[name].T for name in VIT_ATTENTION_PARAMS)
    degenerate = not np.any(grad_z0)
    z0, _, rank, _ = np.linalg.lstsq(grad_z0.T, rhs, rcond=None)
    if rank < spec.seq_len:
        degenerate = True
    tokens = (z0 - w["E_pos"])[1:]
    # tokens = patches @ E_patch; least squares recovers the patches
    patches = np.linalg.lstsq(w["E_patch"].T, tokens.T, rcond=None)[0].T
    image = unpatchify(patches, spec.patch_size, spec.image_size)
    if clamp:
        image = np.clip(image, 0.0, 1.0)
    return AttackResult(image, degenerate=degenerate, iterations=1, rank=int(rank))


# ---------------------------------------------------------------------------
# gradient-matching optimization attack
# ---------------------------------------------------------------------------


def _similarity_and_input_grad(graph, params, flat_params, x, y, target, target_norm):
    try:
        graph.forward(params, x, y)
    except FloatingPointError:
        return float("nan"), None
    g = graph.backward().flat()
    gn = np.linalg.norm(g)
    if gn == 0 or not np.isfinite(gn):
        return float("nan"), None
    sim = float(g @ target / (gn * target_norm))
    # d sim / d g, pulled back to x through the mixed second derivative:
    # J_g(x)^T v = d/dt grad_x L(x; theta + t v) at t = 0
    v = target / (gn * target_norm) - sim * g / gn**2
    h = COMPLEX_STEP / max(np.abs(v).max(), 1e-300)
    probe = params.with_flat(flat_params + 1j * h * v)
    try:
        graph.forward(probe, x.astype(np.complex128), y)
    except FloatingPointError:
        return sim, None
    graph.backward()
    dx = graph.input_gradient().imag / h
    return sim, dx


def optimization_attack(intercepted: InterceptedRound, graph: Graph, cfg: AttackConfig | None = None,
                        *, callback=None) -> AttackResult:
    cfg = cfg or AttackConfig()
    params = intercepted.params
    target = intercepted.payload.flat()
    target_norm = np.linalg.norm(target)
    shape = graph.input_shape
    if target_norm == 0:
        return AttackResult(np.zeros(shape), degenerate=True)
    graph = graph.clone()
    flat_params = params.flat().astype(np.complex128)
    y = intercepted.label
    rng = np.random.default_rng(cfg.seed)
    best = None
    for attempt in range(cfg.max_restarts + 1):
        x = rng.uniform(0.0, 1.0, size=shape) if cfg.init == "uniform" else np.full(shape, 0.5)
        sq = np.zeros(shape)
        sim = float("nan")
        ok = True
        for it in range(1, cfg.iterations + 1):
            sim, dx = _similarity_and_input_grad(graph, params, flat_params, x, y, target, target_norm)
            if dx is None or not np.isfinite(dx).all():
                ok = False
                break
            sq = cfg.decay * sq + (1 - cfg.decay) * dx * dx
            rms = np.sqrt(sq / (1 - cfg.decay**it))
            x = np.clip(x + cfg.step_size * dx / (rms + 1e-12), 0.0, 1.0)
            if callback is not None:
                callback(it, sim, x)
        if ok:
            graph.forward(params, x, y)
            final = cosine_similarity(graph.backward(), target)
            return AttackResult(x, iterations=cfg.iterations, similarity=final, restarts=attempt)
        if best is None or (np.isfinite(sim) and sim > best.similarity):
            best = AttackResult(x, iterations=it, similarity=sim, restarts=attempt)
        log.warning("non-finite attack objective at iteration %d, restarting", it)
    best.degenerate = True
    return best
