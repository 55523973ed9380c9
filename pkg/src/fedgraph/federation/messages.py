"""Wire message construction, coding, and strict schema validation.

Client messages may carry only row indices, real vectors, counts, masked
histograms, public node IDs, and aggregate attribute statistics. The
validator enforces an exact key set per message type, so a message smuggling
edge lists or per-node attribute payloads is rejected.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

from ..errors import ProtocolError

MESSAGE_TYPES = (
    "register",
    "init_bundle",
    "weights_broadcast",
    "client_update",
    "attribute_upload",
    "round_metrics",
    "control",
)

CONTROL_ACTIONS = ("early_stop", "pause", "resume")

#: Keys that must never appear anywhere in any message.
FORBIDDEN_KEYS = frozenset(
    {"edges", "edge_list", "adjacency", "attributes", "attribute_values", "raw_data"}
)


def encode_matrix(array: np.ndarray) -> dict:
    """Float64 matrix as base64 of little-endian bytes plus its shape."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    return {
        "shape": [int(s) for s in arr.shape],
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_matrix(blob: dict) -> np.ndarray:
    shape = tuple(int(s) for s in blob["shape"])
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def encode_uint64(array: np.ndarray) -> dict:
    arr = np.ascontiguousarray(array, dtype="<u8")
    return {
        "shape": [int(s) for s in arr.shape],
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_uint64(blob: dict) -> np.ndarray:
    shape = tuple(int(s) for s in blob["shape"])
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<u8").reshape(shape).copy()


def dump_message(message: dict) -> bytes:
    return json.dumps(message, separators=(",", ":"), sort_keys=True).encode("utf-8")


def load_message(payload: bytes) -> dict:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from exc
    if not isinstance(message, dict):
        raise ProtocolError("message must be a JSON object")
    return message


# ---------------------------------------------------------------------------
# Length-prefixed framing (TCP transport)
# ---------------------------------------------------------------------------

_LENGTH = struct.Struct("!I")


def write_frame(sock, message: dict) -> None:
    payload = dump_message(message)
    sock.sendall(_LENGTH.pack(len(payload)) + payload)


def read_frame(sock) -> dict | None:
    """Next framed message, or None on a clean close between frames."""
    header = _recv_exact(sock, _LENGTH.size, allow_eof=True)
    if header is None:
        return None
    (length,) = _LENGTH.unpack(header)
    return load_message(_recv_exact(sock, length))


def _recv_exact(sock, count: int, allow_eof: bool = False) -> bytes | None:
    chunks: list[bytes] = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if allow_eof and not chunks:
                return None
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _is_str(v) -> bool:
    return isinstance(v, str)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_blob(v) -> bool:
    return (
        isinstance(v, dict)
        and set(v) == {"shape", "data"}
        and isinstance(v["data"], str)
        and isinstance(v["shape"], list)
        and all(_is_int(s) and s >= 0 for s in v["shape"])
    )


def _is_row_list(v) -> bool:
    return isinstance(v, list) and all(_is_int(r) and r >= 0 for r in v)


def _is_id_list(v) -> bool:
    return isinstance(v, list) and all(_is_str(x) and x for x in v)


def _is_stats(v) -> bool:
    if not isinstance(v, list):
        return False
    for entry in v:
        if not isinstance(entry, dict):
            return False
        if set(entry) - {"name", "kind", "empty", "min", "max", "categories", "token_doc_counts"}:
            return False
        if not _is_str(entry.get("name")) or not _is_str(entry.get("kind")):
            return False
        cats = entry.get("categories", [])
        if not isinstance(cats, list) or not all(_is_str(c) for c in cats):
            return False
        tok = entry.get("token_doc_counts", {})
        if not isinstance(tok, dict) or not all(
            _is_str(k) and _is_int(n) and n >= 0 for k, n in tok.items()
        ):
            return False
    return True


def _is_metric_ranges(v) -> bool:
    return isinstance(v, dict) and all(
        _is_str(k)
        and isinstance(rng, list)
        and len(rng) == 2
        and all(_is_real(x) for x in rng)
        for k, rng in v.items()
    )


def _is_masked_map(v) -> bool:
    return isinstance(v, dict) and all(_is_str(k) and _is_blob(b) for k, b in v.items())


def _is_members_map(v) -> bool:
    if not isinstance(v, dict):
        return False
    for key, bins in v.items():
        if not _is_str(key) or not isinstance(bins, list):
            return False
        if not all(_is_row_list(b) for b in bins):
            return False
    return True


def _is_row_map(v) -> bool:
    return isinstance(v, dict) and all(_is_str(k) and _is_int(r) and r >= 0 for k, r in v.items())


def _is_seed_map(v) -> bool:
    return isinstance(v, dict) and all(_is_str(k) and _is_int(s) for k, s in v.items())


def _is_edges_map(v) -> bool:
    return isinstance(v, dict) and all(
        _is_str(k) and isinstance(e, list) and all(_is_real(x) for x in e)
        for k, e in v.items()
    )


_ENVELOPE = {"type": _is_str, "run_id": _is_str, "round": _is_int, "client_id": _is_str}

_SCHEMAS: dict[str, dict] = {
    "register": {
        "node_ids": _is_id_list,
        "node_count": _is_int,
        "edge_count": _is_int,
        "attr_stats": _is_stats,
        "metric_ranges": _is_metric_ranges,
    },
    "init_bundle": {
        "config": lambda v: isinstance(v, dict),
        "n_rows": _is_int,
        "row_map": _is_row_map,
        "merged_stats": lambda v: isinstance(v, list),
        "mask_seeds": _is_seed_map,
        "projection_seed": _is_int,
        "bin_edges": _is_edges_map,
        "participants": _is_id_list,
    },
    "weights_broadcast": {
        "phase": lambda v: v in ("emb", "struc"),
        "final": lambda v: isinstance(v, bool),
        "input_table": _is_blob,
        "output_table": _is_blob,
    },
    "client_update": {
        "phase": lambda v: v in ("emb", "struc"),
        "ok": lambda v: isinstance(v, bool),
        "error": lambda v: v is None or _is_str(v),
        "input_rows": _is_row_list,
        "input_values": _is_blob,
        "output_rows": _is_row_list,
        "output_values": _is_blob,
        "n_samples": _is_int,
    },
    "attribute_upload": {
        "masked": _is_masked_map,
        "bin_members": lambda v: v is None or _is_members_map(v),
        "feature_rows": _is_row_list,
        "features": _is_blob,
        "metric_ranges": _is_metric_ranges,
    },
    "round_metrics": {
        "phase": lambda v: v in ("emb", "struc"),
        "loss": _is_real,
        "duration_s": _is_real,
        "probe_accuracy": lambda v: v is None or _is_real(v),
    },
    "control": {
        "action": lambda v: v in CONTROL_ACTIONS,
    },
}


def _scan_forbidden(value, path: str) -> None:
    if isinstance(value, dict):
        for key, sub in value.items():
            if isinstance(key, str) and key.lower() in FORBIDDEN_KEYS:
                raise ProtocolError(f"forbidden key {key!r} at {path}")
            _scan_forbidden(sub, f"{path}.{key}")
    elif isinstance(value, list):
        for i, sub in enumerate(value):
            _scan_forbidden(sub, f"{path}[{i}]")


def validate_message(message: dict) -> None:
    """Reject any message outside the declared wire contract."""
    if not isinstance(message, dict):
        raise ProtocolError("message must be an object")
    mtype = message.get("type")
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}")
    schema = dict(_ENVELOPE)
    schema.update(_SCHEMAS[mtype])
    extra = set(message) - set(schema)
    if extra:
        raise ProtocolError(f"{mtype}: unexpected fields {sorted(extra)}")
    missing = set(schema) - set(message)
    if missing:
        raise ProtocolError(f"{mtype}: missing fields {sorted(missing)}")
    for key, check in schema.items():
        if not check(message[key]):
            raise ProtocolError(f"{mtype}: field {key!r} fails validation")
    _scan_forbidden(message, mtype)


def audit_transcript(transcript: list[dict]) -> int:
    """Validate every recorded message; returns how many were checked."""
    for record in transcript:
        validate_message(record["message"])
    return len(transcript)
