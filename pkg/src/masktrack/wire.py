"""Binary wire protocol for external refiner backends.

All integers are little-endian u32. Frames:

    request   "MTRQ" | u32 header_len | JSON {"w","h","channels","has_mask"}
              | image bytes (w*h*channels u8, row-major)
              | mask bytes (w*h u8, present iff has_mask)
    response  "MTRS" | u32 w | u32 h | w*h float32 scores, row-major
    error     "MTER" | u32 msg_len | UTF-8 message
    tune      "MTFT" | u32 header_len | JSON {"n_samples"}
              | n_samples blocks, each a request frame body (has_mask true)
                with the target mask bytes (w*h u8) appended
    tune ack  "MTFT" | u32 n_samples
    shutdown  "MTBY" (no body, no response)

Mask bytes use the PNG convention: 255 foreground, 0 background; receivers
treat any nonzero byte as foreground. The transport is any blocking byte
stream (TCP socket or stdio pipe); one request is in flight at a time.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .core import BinaryMask, Image
from .refiners import Refiner, RefinerRequest
from .synthesis import TrainingSample

MAGIC_REQUEST = b"MTRQ"
MAGIC_RESPONSE = b"MTRS"
MAGIC_ERROR = b"MTER"
MAGIC_FINE_TUNE = b"MTFT"
MAGIC_SHUTDOWN = b"MTBY"

_U32 = struct.Struct("<I")
_MAX_HEADER = 1 << 20


class WireError(RuntimeError):
    """Protocol violation or an error frame from the peer."""


# ---------------------------------------------------------------------------
# Frame encoding
# ---------------------------------------------------------------------------


def _encode_header(payload: dict) -> bytes:
    header = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    return _U32.pack(len(header)) + header


def _mask_bytes(mask: BinaryMask) -> bytes:
    return (mask.data.astype(np.uint8) * 255).tobytes()


def _request_body(image: Image, mask: BinaryMask | None) -> bytes:
    header = {
        "w": image.width,
        "h": image.height,
        "channels": image.channels,
        "has_mask": mask is not None,
    }
    body = _encode_header(header) + image.data.tobytes()
    if mask is not None:
        if (mask.height, mask.width) != (image.height, image.width):
            raise ValueError("mask resolution does not match the image")
        body += _mask_bytes(mask)
    return body


def encode_request(image: Image, mask: BinaryMask | None) -> bytes:
    return MAGIC_REQUEST + _request_body(image, mask)


def encode_response(scores: np.ndarray) -> bytes:
    data = np.ascontiguousarray(scores, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("scores must be a 2-D array")
    h, w = data.shape
    return MAGIC_RESPONSE + _U32.pack(w) + _U32.pack(h) + data.tobytes()


def encode_error(message: str) -> bytes:
    raw = message.encode("utf-8")
    return MAGIC_ERROR + _U32.pack(len(raw)) + raw


def encode_fine_tune(samples: Sequence[TrainingSample]) -> bytes:
    if not samples:
        raise ValueError("fine-tune needs at least one sample")
    out = [MAGIC_FINE_TUNE, _encode_header({"n_samples": len(samples)})]
    for sample in samples:
        out.append(_request_body(sample.image, sample.input_mask))
        out.append(_mask_bytes(sample.target_mask))
    return b"".join(out)


def encode_shutdown() -> bytes:
    return MAGIC_SHUTDOWN


# ---------------------------------------------------------------------------
# Frame decoding
# ---------------------------------------------------------------------------


def read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise WireError(f"stream closed {remaining} bytes short of a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _read_u32(stream: BinaryIO) -> int:
    return _U32.unpack(read_exact(stream, 4))[0]


def _read_header(stream: BinaryIO, required: tuple[str, ...]) -> dict:
    length = _read_u32(stream)
    if length > _MAX_HEADER:
        raise WireError(f"header length {length} exceeds the {_MAX_HEADER} byte cap")
    try:
        header = json.loads(read_exact(stream, length).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise WireError(f"malformed JSON header: {exc}") from exc
    for key in required:
        if key not in header:
            raise WireError(f"header is missing the {key!r} field")
    return header


def _decode_request_body(stream: BinaryIO) -> tuple[Image, BinaryMask | None]:
    header = _read_header(stream, ("w", "h", "channels", "has_mask"))
    w, h, channels = header["w"], header["h"], header["channels"]
    if not (isinstance(w, int) and isinstance(h, int) and isinstance(channels, int)):
        raise WireError("header dimensions must be integers")
    if w < 1 or h < 1 or channels not in (1, 3):
        raise WireError(f"unsupported request geometry {w}x{h}x{channels}")
    pixels = read_exact(stream, w * h * channels)
    image = Image(np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels))
    mask = None
    if header["has_mask"]:
        raw = read_exact(stream, w * h)
        mask = BinaryMask(np.frombuffer(raw, dtype=np.uint8).reshape(h, w) > 0)
    return image, mask


def _decode_mask(stream: BinaryIO, w: int, h: int) -> BinaryMask:
    raw = read_exact(stream, w * h)
    return BinaryMask(np.frombuffer(raw, dtype=np.uint8).reshape(h, w) > 0)


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass
class Client:
    """Blocking single-flight client over a pair of binary streams."""

    reader: BinaryIO
    writer: BinaryIO

    def refine(self, image: Image, guidance: BinaryMask | None) -> np.ndarray:
        self.writer.write(encode_request(image, guidance))
        self.writer.flush()
        magic = read_exact(self.reader, 4)
        if magic == MAGIC_ERROR:
            raise WireError(self._read_error())
        if magic != MAGIC_RESPONSE:
            raise WireError(f"expected a response frame, got magic {magic!r}")
        w = _read_u32(self.reader)
        h = _read_u32(self.reader)
        if (w, h) != (image.width, image.height):
            raise WireError(
                f"backend answered {w}x{h} for a {image.width}x{image.height} request"
            )
        raw = read_exact(self.reader, w * h * 4)
        scores = np.frombuffer(raw, dtype="<f4").reshape(h, w)
        return scores.astype(np.float64)

    def fine_tune(self, samples: Sequence[TrainingSample]) -> int:
        self.writer.write(encode_fine_tune(samples))
        self.writer.flush()
        magic = read_exact(self.reader, 4)
        if magic == MAGIC_ERROR:
            raise WireError(self._read_error())
        if magic != MAGIC_FINE_TUNE:
            raise WireError(f"expected a fine-tune ack, got magic {magic!r}")
        acknowledged = _read_u32(self.reader)
        if acknowledged != len(samples):
            raise WireError(
                f"backend acknowledged {acknowledged} of {len(samples)} samples"
            )
        return acknowledged

    def shutdown(self) -> None:
        self.writer.write(encode_shutdown())
        self.writer.flush()

    def _read_error(self) -> str:
        length = _read_u32(self.reader)
        if length > _MAX_HEADER:
            raise WireError("oversized error frame")
        return read_exact(self.reader, length).decode("utf-8", errors="replace")


def connect(address: str, timeout: float = 30.0) -> Client:
    """Open a TCP client for `host:port`."""
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {address!r}")
    sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
    # Two independent buffered wrappers over one socket; the protocol is
    # strictly request/response so this cannot deadlock.
    return Client(reader=sock.makefile("rb"), writer=sock.makefile("wb"))


# ---------------------------------------------------------------------------
# Server loop
# ---------------------------------------------------------------------------


def serve_stream(refiner: Refiner, reader: BinaryIO, writer: BinaryIO) -> int:
    """Answer frames until shutdown or EOF; returns the request count.

    Intended for serving built-in backends to tests and fixtures; the
    learned backend lives in its own package and implements the same loop.
    Backends with a ``fine_tune(samples)`` method honor tune frames, others
    get an error frame back.
    """
    served = 0
    while True:
        try:
            magic = read_exact(reader, 4)
        except WireError:
            return served
        if magic == MAGIC_SHUTDOWN:
            return served
        if magic == MAGIC_REQUEST:
            try:
                image, mask = _decode_request_body(reader)
                scores = refiner.refine(RefinerRequest(image=image, guidance_mask=mask))
                writer.write(encode_response(scores.data))
            except WireError:
                raise
            except Exception as exc:
                writer.write(encode_error(str(exc)))
            writer.flush()
            served += 1
        elif magic == MAGIC_FINE_TUNE:
            header = _read_header(reader, ("n_samples",))
            n = header["n_samples"]
            if not isinstance(n, int) or n < 1:
                raise WireError(f"invalid fine-tune sample count {n!r}")
            samples = []
            for _ in range(n):
                image, mask = _decode_request_body(reader)
                if mask is None:
                    raise WireError("fine-tune samples must carry an input mask")
                target = _decode_mask(reader, image.width, image.height)
                samples.append(
                    TrainingSample(image=image, input_mask=mask, target_mask=target)
                )
            tune = getattr(refiner, "fine_tune", None)
            if tune is None:
                writer.write(encode_error("backend does not support fine-tuning"))
            else:
                tune(samples)
                writer.write(MAGIC_FINE_TUNE + _U32.pack(n))
            writer.flush()
        else:
            writer.write(encode_error(f"unknown frame magic {magic!r}"))
            writer.flush()
            raise WireError(f"unknown frame magic {magic!r}")
