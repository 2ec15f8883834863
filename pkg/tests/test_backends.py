import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from surftex import wire
from surftex.attention import BiasParams, attention_bias
from surftex.attention import DistanceMatrix
from surftex.backends import (
    BackendError,
    DenoiseRequest,
    ProtocolVersionError,
    RemoteBackend,
    SyntheticBackend,
    attach_attention_hooks,
    ramp_target,
    remote_denoise,
    synthetic_denoise,
)
from surftex.scheduler import make_schedule


def make_request(rng, n=2, h=8, w=8, c=3, with_bias=False, abar=0.5):
    biases = None
    if with_bias:
        d = DistanceMatrix(
            entries=rng.random((4, 8)),
            q_fg=np.array([True, True, False, True]),
            k_fg=rng.random(8) > 0.3,
        )
        if not d.k_fg.any():
            d.k_fg[0] = True
        bias = attention_bias(d, 2.0, 20.0, 0.1)
        bias.view = 0
        bias.resolution = 2
        bias.attended_views = (0, 1)
        biases = {(0, 2): bias}
    return DenoiseRequest(
        latents=rng.normal(size=(n, h, w, c)),
        step_index=3,
        timestep_value=119,
        alpha_bar=abar,
        prompt="a carved wooden fox",
        depth_maps=rng.random((n, h, w)),
        cfg_scale=12.0,
        biases=biases,
        position_maps=rng.random((n, h, w, 3)) - 0.5,
        fg_masks=(rng.random((n, h, w)) > 0.4).astype(float),
    )


# ---------------------------------------------------------------------------
# synthetic backend
# ---------------------------------------------------------------------------


def test_synthetic_recovers_injected_noise(rng):
    """If z_t was diffused from the target, the predicted noise is exact."""
    sched = make_schedule(5)
    t = 3
    n, h, w, c = 2, 6, 6, 3
    pos = rng.random((n, h, w, 3)) - 0.5
    fg = np.ones((n, h, w))
    x0 = np.stack([ramp_target(pos[i]) for i in range(n)])
    eps = rng.normal(size=(n, h, w, c))
    z_t = np.stack([sched.forward_diffuse(x0[i], t, eps[i]) for i in range(n)])
    req = DenoiseRequest(
        latents=z_t, step_index=t, timestep_value=0, alpha_bar=sched.abar(t),
        prompt="", depth_maps=None, cfg_scale=1.0, biases=None,
        position_maps=pos, fg_masks=fg,
    )
    resp = synthetic_denoise(req, ramp_target)
    np.testing.assert_allclose(resp.eps_hat, eps, atol=1e-9)


def test_synthetic_background_drives_to_zero(rng):
    sched = make_schedule(5)
    t = 2
    req = make_request(rng, abar=sched.abar(t))
    req.fg_masks = np.zeros_like(req.fg_masks)
    resp = synthetic_denoise(req, ramp_target)
    x0 = sched.predict_x0(req.latents[0], resp.eps_hat[0], t)
    np.testing.assert_allclose(x0, 0.0, atol=1e-9)


def test_synthetic_pure_function(rng):
    req = make_request(rng)
    backend = SyntheticBackend(ramp_target)
    a = backend(req)
    b = backend(req)
    np.testing.assert_array_equal(a.eps_hat, b.eps_hat)


def test_synthetic_alpha_bar_one_guard(rng):
    req = make_request(rng, abar=1.0)
    resp = synthetic_denoise(req, ramp_target)
    np.testing.assert_array_equal(resp.eps_hat, np.zeros_like(req.latents))


def test_synthetic_requires_context(rng):
    req = make_request(rng)
    req.position_maps = None
    with pytest.raises(BackendError):
        synthetic_denoise(req, ramp_target)


def test_attach_attention_hooks(rng):
    req = make_request(rng)
    assert attach_attention_hooks(req, 25, 25, 3).mode == "replace"  # step 0 done
    assert attach_attention_hooks(req, 23, 25, 3).mode == "replace"  # 2 done
    assert attach_attention_hooks(req, 22, 25, 3).mode == "reweigh"  # 3 done
    assert attach_attention_hooks(req, 25, 25, 0).mode == "reweigh"  # window 0


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def test_twtf_round_trip(rng):
    for shape in [(3,), (4, 5), (2, 3, 4), (1, 2, 3, 4)]:
        arr = rng.normal(size=shape).astype(np.float32)
        back = wire.twtf_parse(wire.twtf_bytes(arr))
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


def test_twtf_rejects_garbage():
    with pytest.raises(wire.WireFormatError):
        wire.twtf_parse(b"NOPE" + b"\x00" * 16)
    good = wire.twtf_bytes(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(wire.WireFormatError):
        wire.twtf_parse(good[:-3])  # truncated


def test_multipart_round_trip(rng):
    parts = [
        ("manifest", b'{"a": 1}', "application/json"),
        ("latents", wire.twtf_bytes(rng.normal(size=(2, 3)).astype(np.float32)), "application/x-twtf"),
        ("weird", b"\r\n--binary\r\n\x00\xff", "application/octet-stream"),
    ]
    body, ctype = wire.encode_multipart(parts)
    back = wire.decode_multipart(body, ctype)
    assert set(back) == {"manifest", "latents", "weird"}
    for name, payload, _ in parts:
        assert back[name] == payload


def test_request_body_round_trip(rng):
    req = make_request(rng, with_bias=True)
    body, ctype = wire.build_request_body(req)
    manifest, tensors = wire.parse_request_body(body, ctype)
    assert manifest["uuid"] == req.uuid
    assert manifest["prompt"] == req.prompt
    assert manifest["mode"] == "reweigh"
    assert manifest["n_views"] == 2
    np.testing.assert_array_equal(tensors["latents"], req.latents.astype(np.float32))
    np.testing.assert_array_equal(tensors["depth"], req.depth_maps.astype(np.float32))
    ref = manifest["bias_refs"][0]
    assert ref["name"] == "bias_0_2"
    np.testing.assert_array_equal(
        tensors["bias_0_2"], req.biases[(0, 2)].entries.astype(np.float32)
    )


def test_response_body_round_trip(rng):
    eps = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    body, ctype = wire.build_response_body({"uuid": "u1"}, eps)
    manifest, back = wire.parse_response_body(body, ctype)
    assert manifest["uuid"] == "u1"
    np.testing.assert_array_equal(back, eps)


# ---------------------------------------------------------------------------
# remote client against a minimal in-test bridge mock
# ---------------------------------------------------------------------------


class MockBridgeHandler(BaseHTTPRequestHandler):
    mode = "echo"
    fail_next = 0
    expected_protocol = str(wire.PROTOCOL_VERSION)  # pinned pre-monkeypatch

    def log_message(self, *args):
        pass

    def do_GET(self):
        if self.path == "/v1/health":
            payload = json.dumps({"version": wire.PROTOCOL_VERSION}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(payload)
        else:
            self.send_response(404)
            self.end_headers()

    def do_POST(self):
        cls = type(self)
        if cls.fail_next > 0:
            cls.fail_next -= 1
            self.send_response(503)
            self.end_headers()
            return
        if self.headers.get(wire.PROTOCOL_HEADER) != type(self).expected_protocol:
            self.send_response(409)
            self.send_header(wire.PROTOCOL_HEADER, "999")
            self.end_headers()
            return
        body = self.rfile.read(int(self.headers["Content-Length"]))
        manifest, tensors = wire.parse_request_body(body, self.headers["Content-Type"])
        latents = tensors["latents"]
        eps = latents if cls.mode == "echo" else np.zeros_like(latents)
        out, ctype = wire.build_response_body(
            {"uuid": manifest["uuid"], "backend_info": {"mode": cls.mode}}, eps
        )
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.end_headers()
        self.wfile.write(out)


@pytest.fixture
def mock_bridge():
    server = ThreadingHTTPServer(("127.0.0.1", 0), MockBridgeHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    MockBridgeHandler.mode = "echo"
    MockBridgeHandler.fail_next = 0
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    thread.join(timeout=5)


def test_remote_echo_round_trip(rng, mock_bridge):
    req = make_request(rng, with_bias=True)
    resp = remote_denoise(req, mock_bridge)
    # float32 on the wire both ways: echo is bit-identical at f32
    np.testing.assert_array_equal(
        resp.eps_hat.astype(np.float32), req.latents.astype(np.float32)
    )
    assert resp.backend_info == {"mode": "echo"}


def test_remote_zero_mode(rng, mock_bridge):
    MockBridgeHandler.mode = "zero"
    req = make_request(rng)
    resp = remote_denoise(req, mock_bridge)
    np.testing.assert_array_equal(resp.eps_hat, np.zeros_like(req.latents))


def test_remote_retries_transient_failure(rng, mock_bridge):
    MockBridgeHandler.fail_next = 1
    req = make_request(rng)
    resp = remote_denoise(req, mock_bridge, retries=2, backoff=0.01)
    np.testing.assert_array_equal(
        resp.eps_hat.astype(np.float32), req.latents.astype(np.float32)
    )


def test_remote_version_mismatch(rng, mock_bridge, monkeypatch):
    monkeypatch.setattr(wire, "PROTOCOL_VERSION", 999)
    req = make_request(rng)
    with pytest.raises(ProtocolVersionError):
        remote_denoise(req, mock_bridge)


def test_remote_unreachable(rng):
    req = make_request(rng)
    with pytest.raises(BackendError):
        remote_denoise(req, "http://127.0.0.1:9", retries=0)


def test_remote_health(mock_bridge):
    backend = RemoteBackend(mock_bridge)
    assert backend.health() == {"version": wire.PROTOCOL_VERSION}
