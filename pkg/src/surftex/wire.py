"""Artifact and wire-format I/O.

TWTF is the flat tensor container used for every serialized array: magic
"TWTF", u32 version, u32 rank, u32 dims[rank], then float32 little-endian
data. The denoiser wire protocol ships a JSON manifest plus one TWTF part
per tensor in a multipart body; the same codec is used for requests and
responses so round trips are bit-exact.
"""

from __future__ import annotations

import json
import secrets
import struct
from pathlib import Path

import numpy as np

TWTF_MAGIC = b"TWTF"
TWTF_VERSION = 1
PROTOCOL_VERSION = 1
PROTOCOL_HEADER = "x-denoise-protocol"


class WireFormatError(ValueError):
    pass


def twtf_bytes(arr: np.ndarray) -> bytes:
    """Encode an array as TWTF (float32, little-endian, C order)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TWTF_MAGIC + struct.pack(
        "<II", TWTF_VERSION, arr.ndim
    ) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def twtf_parse(data: bytes) -> np.ndarray:
    if data[:4] != TWTF_MAGIC:
        raise WireFormatError("bad TWTF magic")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != TWTF_VERSION:
        raise WireFormatError(f"unsupported TWTF version {version}")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 4 * count
    if len(data) != expected:
        raise WireFormatError(
            f"TWTF payload has {len(data)} bytes, expected {expected}"
        )
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return flat.reshape(dims).copy()


def save_twtf(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(twtf_bytes(arr))


def load_twtf(path: str | Path) -> np.ndarray:
    return twtf_parse(Path(path).read_bytes())


def save_png(path: str | Path, arr: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit PNG export for visual inspection; values linearly mapped lo->0,
    hi->255 (defaults to the array's own range)."""
    from PIL import Image

    a = np.asarray(arr, dtype=np.float64)
    if lo is None:
        lo = float(a.min()) if a.size else 0.0
    if hi is None:
        hi = float(a.max()) if a.size else 1.0
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((a - lo) / (hi - lo) * 255.0, 0.0, 255.0).astype(np.uint8)
    if scaled.ndim == 3 and scaled.shape[-1] == 1:
        scaled = scaled[..., 0]
    mode = "RGB" if scaled.ndim == 3 else "L"
    Image.fromarray(scaled, mode=mode).save(str(path))


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    img = np.asarray(Image.open(str(path)))
    return img.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# multipart codec (self-contained; both client and server sides use one of
# these implementations, so framing stays symmetric)
# ---------------------------------------------------------------------------


def encode_multipart(parts: list[tuple[str, bytes, str]]) -> tuple[bytes, str]:
    """Encode (name, payload, content_type) parts as multipart/form-data.

    Returns (body, content_type_header_value).
    """
    boundary = "twtf-" + secrets.token_hex(16)
    chunks = []
    for name, payload, ctype in parts:
        chunks.append(
            (
                f"--{boundary}\r\n"
                f'Content-Disposition: form-data; name="{name}"; filename="{name}"\r\n'
                f"Content-Type: {ctype}\r\n\r\n"
            ).encode()
        )
        chunks.append(payload)
        chunks.append(b"\r\n")
    chunks.append(f"--{boundary}--\r\n".encode())
    return b"".join(chunks), f"multipart/form-data; boundary={boundary}"


def decode_multipart(body: bytes, content_type: str) -> dict[str, bytes]:
    """Parse a multipart body back into {part name: payload}."""
    marker = "boundary="
    if marker not in content_type:
        raise WireFormatError("content type carries no multipart boundary")
    boundary = content_type.split(marker, 1)[1].split(";")[0].strip().strip('"')
    delim = ("--" + boundary).encode()
    sections = body.split(delim)
    parts: dict[str, bytes] = {}
    for section in sections[1:-1]:
        if section[:2] == b"\r\n":
            section = section[2:]
        try:
            head, payload = section.split(b"\r\n\r\n", 1)
        except ValueError as exc:
            raise WireFormatError("malformed multipart section") from exc
        if payload.endswith(b"\r\n"):
            payload = payload[:-2]
        name = None
        for line in head.split(b"\r\n"):
            text = line.decode("latin-1")
            if text.lower().startswith("content-disposition"):
                for field in text.split(";"):
                    field = field.strip()
                    if field.startswith("name="):
                        name = field[5:].strip('"')
        if name is None:
            raise WireFormatError("multipart section without a name")
        parts[name] = payload
    return parts


# ---------------------------------------------------------------------------
# denoise request/response framing
# ---------------------------------------------------------------------------


def build_request_body(req) -> tuple[bytes, str]:
    """Serialize a DenoiseRequest: manifest JSON + TWTF tensor parts."""
    bias_refs = []
    tensor_parts: list[tuple[str, bytes, str]] = []
    for key, bias in sorted(req.biases.items()) if req.biases else []:
        view, res = key
        name = f"bias_{view}_{res}"
        bias_refs.append(
            {
                "name": name,
                "view": view,
                "resolution": res,
                "o": bias.params.o,
                "r": bias.params.r,
                "delta": bias.params.delta,
                "attended_views": list(bias.attended_views),
            }
        )
        tensor_parts.append((name, twtf_bytes(bias.entries), "application/x-twtf"))

    manifest = {
        "protocol": PROTOCOL_VERSION,
        "uuid": req.uuid,
        "step_index": req.step_index,
        "timestep_value": req.timestep_value,
        "alpha_bar": req.alpha_bar,
        "prompt": req.prompt,
        "prompt_suffixes": list(req.prompt_suffixes) if req.prompt_suffixes else None,
        "cfg_scale": req.cfg_scale,
        "mode": req.mode,
        "n_views": int(req.latents.shape[0]),
        "shapes": {
            "latents": list(req.latents.shape),
            "depth": list(req.depth_maps.shape) if req.depth_maps is not None else None,
        },
        "bias_refs": bias_refs,
    }
    parts = [("manifest", json.dumps(manifest).encode(), "application/json")]
    parts.append(("latents", twtf_bytes(req.latents), "application/x-twtf"))
    if req.depth_maps is not None:
        parts.append(("depth", twtf_bytes(req.depth_maps), "application/x-twtf"))
    parts.extend(tensor_parts)
    return encode_multipart(parts)


def parse_request_body(body: bytes, content_type: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Server-side decode: returns (manifest, {tensor name: array})."""
    parts = decode_multipart(body, content_type)
    if "manifest" not in parts:
        raise WireFormatError("request is missing the manifest part")
    manifest = json.loads(parts.pop("manifest"))
    tensors = {name: twtf_parse(payload) for name, payload in parts.items()}
    if "latents" not in tensors:
        raise WireFormatError("request is missing the latents tensor")
    return manifest, tensors


def build_response_body(manifest: dict, eps: np.ndarray) -> tuple[bytes, str]:
    parts = [
        ("manifest", json.dumps(manifest).encode(), "application/json"),
        ("eps", twtf_bytes(eps), "application/x-twtf"),
    ]
    return encode_multipart(parts)


def parse_response_body(body: bytes, content_type: str) -> tuple[dict, np.ndarray]:
    parts = decode_multipart(body, content_type)
    if "manifest" not in parts or "eps" not in parts:
        raise WireFormatError("response is missing manifest or eps parts")
    return json.loads(parts["manifest"]), twtf_parse(parts["eps"])
