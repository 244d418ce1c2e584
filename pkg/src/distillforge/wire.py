"""Remote-oracle wire protocol: length-prefixed binary frames over a stream.

Frame: u32 length (little-endian), then the payload.

Request payload:
    u32  protocol_version   (PROTOCOL_VERSION)
    u32  shape[3]           x_t tensor shape, row-major data
    u32  t                  diffusion step index
    u32  tag_len, utf8      condition tag
    u32  landmark_len, PNG  optional landmark image (0 = absent)
    f32  x_t                little-endian, prod(shape) values

Response payload:
    u8   status             0 ok, 1 version mismatch, 2 malformed, 3 oracle error
    u32  protocol_version   echoed
    ok:     f32 eps, same element count as the request
    error:  u32 msg_len, utf8 message

A version mismatch is a hard error on the client side.
"""

from __future__ import annotations

import io
import socket
import struct

import numpy as np

from .diffusion import Condition, DenoiserOracle, NoiseSchedule
from .errors import OracleError, ProtocolError

PROTOCOL_VERSION = 1

STATUS_OK = 0
STATUS_VERSION_MISMATCH = 1
STATUS_MALFORMED = 2
STATUS_ORACLE_ERROR = 3


def encode_request(shape: tuple[int, int, int], t: int, tag: str,
                   x_t: np.ndarray, landmark_png: bytes = b"",
                   version: int = PROTOCOL_VERSION) -> bytes:
    tag_b = tag.encode("utf8")
    data = np.ascontiguousarray(x_t, dtype="<f4").tobytes()
    payload = (struct.pack("<IIIII", version, *shape)
               + struct.pack("<I", t)
               + struct.pack("<I", len(tag_b)) + tag_b
               + struct.pack("<I", len(landmark_png)) + landmark_png
               + data)
    return struct.pack("<I", len(payload)) + payload


def decode_request(payload: bytes):
    """-> (version, shape, t, tag, landmark_png, x_t float32 array)."""
    try:
        version, s0, s1, s2, t = struct.unpack_from("<IIIII", payload, 0)
        off = 20
        (tag_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        tag = payload[off:off + tag_len].decode("utf8")
        off += tag_len
        (lm_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        landmark = payload[off:off + lm_len]
        off += lm_len
        count = s0 * s1 * s2
        raw = payload[off:off + 4 * count]
        if len(raw) != 4 * count or off + 4 * count != len(payload):
            raise ProtocolError("request length does not match its shape")
        x_t = np.frombuffer(raw, dtype="<f4").reshape(s0, s1, s2)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed request frame: {exc}") from exc
    return version, (s0, s1, s2), t, tag, landmark, x_t


def encode_response_ok(eps: np.ndarray,
                       version: int = PROTOCOL_VERSION) -> bytes:
    payload = (struct.pack("<BI", STATUS_OK, version)
               + np.ascontiguousarray(eps, dtype="<f4").tobytes())
    return struct.pack("<I", len(payload)) + payload


def encode_response_error(status: int, message: str,
                          version: int = PROTOCOL_VERSION) -> bytes:
    msg = message.encode("utf8")
    payload = (struct.pack("<BI", status, version)
               + struct.pack("<I", len(msg)) + msg)
    return struct.pack("<I", len(payload)) + payload


def decode_response(payload: bytes, expected_count: int):
    """-> (status, version, eps or error message)."""
    status, version = struct.unpack_from("<BI", payload, 0)
    off = 5
    if status == STATUS_OK:
        raw = payload[off:]
        if len(raw) != 4 * expected_count:
            raise ProtocolError(
                f"response carries {len(raw) // 4} values, expected "
                f"{expected_count}")
        return status, version, np.frombuffer(raw, dtype="<f4")
    (msg_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    return status, version, payload[off:off + msg_len].decode("utf8")


def read_frame(stream) -> bytes:
    header = _read_exact(stream, 4)
    (length,) = struct.unpack("<I", header)
    return _read_exact(stream, length)


def write_frame(stream, frame: bytes) -> None:
    stream.sendall(frame) if hasattr(stream, "sendall") else stream.write(frame)


def _read_exact(stream, n: int) -> bytes:
    chunks = io.BytesIO()
    got = 0
    while got < n:
        chunk = (stream.recv(n - got) if hasattr(stream, "recv")
                 else stream.read(n - got))
        if not chunk:
            raise ProtocolError("stream closed mid-frame")
        chunks.write(chunk)
        got += len(chunk)
    return chunks.getvalue()


class RemoteOracle(DenoiserOracle):
    """predict_eps over the wire; one request in flight per connection."""

    def __init__(self, host: str, port: int, shape: tuple[int, int, int],
                 schedule: NoiseSchedule, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.shape = tuple(shape)
        self.schedule = schedule
        self.timeout = timeout
        self._sock: socket.socket | None = None

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.shape

    def _connection(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port),
                                                  timeout=self.timeout)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def predict_eps(self, x_t: np.ndarray, t: int,
                    condition: Condition) -> np.ndarray:
        self.check_shape(x_t)
        landmark_png = b""
        if condition.landmark is not None:
            from .images import to_uint8
            from PIL import Image
            buf = io.BytesIO()
            Image.fromarray(to_uint8(condition.landmark.image)).save(
                buf, format="PNG")
            landmark_png = buf.getvalue()
        frame = encode_request(self.shape, t, condition.prompt_tag,
                               np.asarray(x_t, dtype=np.float32),
                               landmark_png)
        sock = self._connection()
        try:
            write_frame(sock, frame)
            payload = read_frame(sock)
        except (OSError, ProtocolError):
            self.close()
            raise
        status, version, body = decode_response(
            payload, int(np.prod(self.shape)))
        if status == STATUS_VERSION_MISMATCH:
            self.close()
            raise ProtocolError(
                f"remote oracle speaks protocol {version}, this client "
                f"speaks {PROTOCOL_VERSION}")
        if status != STATUS_OK:
            raise OracleError(f"remote oracle error (status {status}): {body}")
        return body.astype(np.float64).reshape(self.shape)
