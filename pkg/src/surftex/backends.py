"""The denoiser contract and its two realizations.

A denoiser maps (noisy latents, timestep, prompt, depth conditions, bias
matrices) to predicted noise per view. The synthetic backend is a pure
function built around an analytic target in surface coordinates: it returns
exactly the noise that makes the denoised estimate equal the target, which
turns the whole pipeline into something with a checkable fixed point. The
remote backend speaks the multipart TWTF protocol to a bridge service that
fronts a real diffusion model.
"""

from __future__ import annotations

import time
import uuid as uuid_mod
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
import requests

from . import wire
from .attention import BiasMatrix


class BackendError(RuntimeError):
    """Denoiser failure, transport- or model-side."""


class ProtocolVersionError(BackendError):
    pass


@dataclass
class DenoiseRequest:
    latents: np.ndarray  # (N, H, W, C)
    step_index: int  # inference step t (T..1)
    timestep_value: int  # underlying training timestep
    alpha_bar: float
    prompt: str
    depth_maps: np.ndarray | None  # (N, H, W)
    cfg_scale: float
    biases: dict[tuple[int, int], BiasMatrix] | None  # (view, resolution) -> bias
    mode: str = "reweigh"  # reweigh | replace
    uuid: str = field(default_factory=lambda: str(uuid_mod.uuid4()))
    prompt_suffixes: list[str] | None = None
    # local-only context for the synthetic backend; never serialized
    position_maps: np.ndarray | None = None  # (N, H, W, 3)
    fg_masks: np.ndarray | None = None  # (N, H, W)

    def __post_init__(self):
        if self.latents.ndim != 4 or self.latents.shape[0] < 1:
            raise ValueError("latents must be (N, H, W, C) with N >= 1")
        if self.mode not in ("reweigh", "replace"):
            raise ValueError(f"unknown attention mode {self.mode!r}")


@dataclass
class DenoiseResponse:
    eps_hat: np.ndarray  # (N, H, W, C)
    backend_info: dict = field(default_factory=dict)


class DenoiseBackend(Protocol):
    def __call__(self, req: DenoiseRequest) -> DenoiseResponse: ...


TargetFn = Callable[[np.ndarray], np.ndarray]  # (..., 3) positions -> (..., C)


def synthetic_denoise(req: DenoiseRequest, target_fn: TargetFn) -> DenoiseResponse:
    """Noise prediction consistent with an analytic surface-space target.

    x0 for each view is target_fn over that view's position map on the
    foreground and zero on the background; the returned eps is exactly the
    noise that makes predict_x0 recover it.
    """
    if req.position_maps is None or req.fg_masks is None:
        raise BackendError("synthetic backend needs position maps and fg masks")
    ab = req.alpha_bar
    if ab >= 1.0:
        return DenoiseResponse(eps_hat=np.zeros_like(req.latents), backend_info={"degenerate": True})
    n, h, w, c = req.latents.shape
    x0 = np.zeros((n, h, w, c))
    for i in range(n):
        values = np.asarray(target_fn(req.position_maps[i]), dtype=np.float64)
        if values.shape != (h, w, c):
            raise BackendError(
                f"target function returned {values.shape}, expected {(h, w, c)}"
            )
        x0[i] = values * req.fg_masks[i][..., None]
    eps_hat = (req.latents - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    return DenoiseResponse(eps_hat=eps_hat, backend_info={"backend": "synthetic"})


@dataclass
class SyntheticBackend:
    """Deterministic test denoiser: same request in, same response out."""

    target_fn: TargetFn

    def __call__(self, req: DenoiseRequest) -> DenoiseResponse:
        return synthetic_denoise(req, self.target_fn)


def ramp_target(positions: np.ndarray) -> np.ndarray:
    """Canonical analytic target: RGB = position + 0.5 (normalized meshes
    live in [-0.5, 0.5]^3, so values land in [0, 1])."""
    return np.asarray(positions, dtype=np.float64) + 0.5


NAMED_TARGETS: dict[str, TargetFn] = {
    "ramp": ramp_target,
}


def remote_denoise(
    req: DenoiseRequest,
    endpoint: str,
    timeout: float = 120.0,
    retries: int = 2,
    backoff: float = 0.5,
) -> DenoiseResponse:
    """POST the request to a bridge service and decode the response.

    Transient transport failures are retried with the same request UUID, so
    the call is idempotent from the bridge's point of view.
    """
    body, content_type = wire.build_request_body(req)
    url = endpoint.rstrip("/") + "/v1/denoise"
    headers = {
        "Content-Type": content_type,
        wire.PROTOCOL_HEADER: str(wire.PROTOCOL_VERSION),
    }
    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, data=body, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_exc = exc
            if attempt < retries:
                time.sleep(backoff * (attempt + 1))
                continue
            raise BackendError(f"bridge unreachable at {url}: {exc}") from exc
        if resp.status_code == 409:
            raise ProtocolVersionError(
                f"bridge speaks protocol {resp.headers.get(wire.PROTOCOL_HEADER)} "
                f"but client speaks {wire.PROTOCOL_VERSION}"
            )
        if resp.status_code >= 500 and attempt < retries:
            last_exc = BackendError(f"bridge error {resp.status_code}: {resp.text[:200]}")
            time.sleep(backoff * (attempt + 1))
            continue
        if resp.status_code != 200:
            raise BackendError(f"bridge error {resp.status_code}: {resp.text[:500]}")
        manifest, eps = wire.parse_response_body(
            resp.content, resp.headers.get("Content-Type", "")
        )
        if manifest.get("uuid") != req.uuid:
            raise BackendError("response uuid does not match request")
        eps = eps.astype(np.float64)
        if eps.shape != req.latents.shape:
            raise BackendError(
                f"bridge returned eps {eps.shape}, expected {req.latents.shape}"
            )
        if not np.isfinite(eps).all():
            raise BackendError("bridge returned non-finite noise")
        return DenoiseResponse(eps_hat=eps, backend_info=manifest.get("backend_info", {}))
    raise BackendError(f"bridge unreachable at {url}: {last_exc}")


@dataclass
class RemoteBackend:
    endpoint: str
    timeout: float = 120.0
    retries: int = 2

    def __call__(self, req: DenoiseRequest) -> DenoiseResponse:
        return remote_denoise(req, self.endpoint, timeout=self.timeout, retries=self.retries)

    def health(self) -> dict:
        url = self.endpoint.rstrip("/") + "/v1/health"
        try:
            resp = requests.get(url, timeout=10.0)
        except requests.RequestException as exc:
            raise BackendError(f"bridge unreachable at {url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"bridge health check failed: {resp.status_code}")
        return resp.json()


def attach_attention_hooks(
    req: DenoiseRequest, step_index: int, total_steps: int, replace_steps: int
) -> DenoiseRequest:
    """Annotate the request with the attention strategy for this step:
    geometry-only replacement during the first replace_steps steps, additive
    reweighing afterwards."""
    steps_done = total_steps - step_index
    mode = "replace" if steps_done < replace_steps else "reweigh"
    return replace(req, mode=mode)
