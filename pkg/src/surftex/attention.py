"""3D-aware attention biases for cross-view self-attention.

The bias between a query patch and a key patch is a log-domain additive term
derived from the Euclidean distance between their surface points: zero at
distance zero, decaying like -o*ln(1 + r*d), clamped below at ln(delta).
Background-background pairs are left untouched (bias 0); foreground and
background never attend to each other (masked). The reweigh transform adds
the bias inside the softmax; the replace transform drops the content
similarity entirely and attends by geometry alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import RenderedMaps, downsample_maps

# log-domain mask standing in for -inf: softmax underflows to exactly 0
# without generating NaNs on any backend
NEG_INF = -1.0e9


@dataclass(frozen=True)
class BiasParams:
    o: float = 2.0
    r: float = 20.0
    delta: float = 0.1

    def __post_init__(self):
        if self.o <= 0 or self.r <= 0:
            raise ValueError("o and r must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")

    @property
    def clamp_onset(self) -> float:
        """Distance beyond which the foreground bias sits at ln(delta)."""
        return (self.delta ** (-1.0 / self.o) - 1.0) / self.r


@dataclass
class DistanceMatrix:
    entries: np.ndarray  # (N_Q, N_K) Euclidean distances
    q_fg: np.ndarray  # (N_Q,) bool
    k_fg: np.ndarray  # (N_K,) bool


@dataclass
class BiasMatrix:
    entries: np.ndarray  # (N_Q, N_K) log-domain biases
    params: BiasParams
    view: int = -1
    resolution: int = 0
    attended_views: tuple = ()


def pairwise_distance(
    query_maps: RenderedMaps, key_maps: list[RenderedMaps]
) -> DistanceMatrix:
    """Distances between the query view's patches and the concatenated key
    patches of the attended views (row-major flattening)."""
    res = query_maps.resolution
    for m in key_maps:
        if m.resolution != res:
            raise ValueError(
                f"key maps at resolution {m.resolution}, query at {res}"
            )
    q_pos = query_maps.position.reshape(-1, 3)
    k_pos = np.concatenate([m.position.reshape(-1, 3) for m in key_maps], axis=0)
    diff = q_pos[:, None, :] - k_pos[None, :, :]
    entries = np.sqrt(np.einsum("qkd,qkd->qk", diff, diff))
    q_fg = query_maps.fg_mask.reshape(-1)
    k_fg = np.concatenate([m.fg_mask.reshape(-1) for m in key_maps])
    return DistanceMatrix(entries=entries, q_fg=q_fg, k_fg=k_fg)


def attention_bias(d: DistanceMatrix, o: float, r: float, delta: float) -> BiasMatrix:
    """Three-case bias: BG-BG pairs 0, FG-FG pairs max(-o*ln(1+r*d), ln delta),
    mixed pairs masked. The clamp applies only to the FG-FG branch."""
    params = BiasParams(o=o, r=r, delta=delta)
    fg_pair = d.q_fg[:, None] & d.k_fg[None, :]
    bg_pair = ~d.q_fg[:, None] & ~d.k_fg[None, :]
    entries = np.full(d.entries.shape, NEG_INF)
    entries[bg_pair] = 0.0
    fg_vals = -o * np.log1p(r * d.entries[fg_pair])
    entries[fg_pair] = np.maximum(fg_vals, np.log(delta))
    return BiasMatrix(entries=entries, params=params)


def _masked_softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax treating entries at/below NEG_INF as fully masked."""
    masked = logits <= NEG_INF / 2
    if masked.all(axis=-1).any():
        raise ValueError("attention row is entirely masked")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights[masked] = 0.0
    return weights / weights.sum(axis=-1, keepdims=True)


def reweigh_attention(S: np.ndarray, W: BiasMatrix | np.ndarray, V: np.ndarray) -> np.ndarray:
    """Softmax(S + W) @ V with bias-masked rows renormalized to sum to 1."""
    Wm = W.entries if isinstance(W, BiasMatrix) else W
    if S.shape != Wm.shape:
        raise ValueError(f"similarity {S.shape} vs bias {Wm.shape}")
    logits = np.where(Wm <= NEG_INF / 2, NEG_INF, S + Wm)
    return _masked_softmax(logits) @ V


def replace_attention(W: BiasMatrix | np.ndarray, V: np.ndarray) -> np.ndarray:
    """Softmax(W) @ V: attention driven purely by 3D proximity."""
    Wm = W.entries if isinstance(W, BiasMatrix) else W
    return _masked_softmax(Wm) @ V


def build_view_biases(
    all_maps: list[RenderedMaps],
    attended: list[list[int]],
    resolutions: list[int],
    params: BiasParams = BiasParams(),
) -> dict[tuple[int, int], BiasMatrix]:
    """Bias matrices for every (query view, attention resolution) pair.

    Maps are block-downsampled to each attention resolution first; keys are
    the attended views' patches concatenated in the order given.
    """
    n_views = len(all_maps)
    for n, views in enumerate(attended):
        if not views:
            raise ValueError(f"attended set of view {n} is empty")
        if n not in views:
            raise ValueError(f"attended set of view {n} must contain itself")
        if any(v < 0 or v >= n_views for v in views):
            raise ValueError(f"attended set of view {n} out of range")

    out: dict[tuple[int, int], BiasMatrix] = {}
    for res in resolutions:
        factor = all_maps[0].resolution // res
        if factor * res != all_maps[0].resolution:
            raise ValueError(
                f"attention resolution {res} does not divide map resolution "
                f"{all_maps[0].resolution}"
            )
        small = [downsample_maps(m, factor) if factor > 1 else m for m in all_maps]
        for n in range(n_views):
            d = pairwise_distance(small[n], [small[v] for v in attended[n]])
            bias = attention_bias(d, params.o, params.r, params.delta)
            bias.view = n
            bias.resolution = res
            bias.attended_views = tuple(attended[n])
            out[(n, res)] = bias
    return out


def attended_sets(n_views: int, scheme: str = "all") -> list[list[int]]:
    """Which views attend to which: "all" (default) or "neighbors:k"."""
    if scheme == "all":
        return [list(range(n_views)) for _ in range(n_views)]
    if scheme.startswith("neighbors"):
        k = int(scheme.split(":", 1)[1]) if ":" in scheme else 1
        out = []
        for n in range(n_views):
            ring = {(n + d) % n_views for d in range(-k, k + 1)}
            out.append(sorted(ring))
        return out
    raise ValueError(f"unknown attended-view scheme {scheme!r}")


def save_bias(bias: BiasMatrix, path: str | Path) -> None:
    """Write the matrix as TWTF plus a JSON sidecar with its parameters."""
    from . import wire

    path = Path(path)
    wire.save_twtf(path, bias.entries)
    sidecar = {
        "view": bias.view,
        "resolution": bias.resolution,
        "o": bias.params.o,
        "r": bias.params.r,
        "delta": bias.params.delta,
        "attended_views": list(bias.attended_views),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_bias(path: str | Path) -> BiasMatrix:
    from . import wire

    path = Path(path)
    entries = wire.load_twtf(path).astype(np.float64)
    meta = json.loads(path.with_suffix(".json").read_text())
    return BiasMatrix(
        entries=entries,
        params=BiasParams(o=meta["o"], r=meta["r"], delta=meta["delta"]),
        view=meta["view"],
        resolution=meta["resolution"],
        attended_views=tuple(meta["attended_views"]),
    )
