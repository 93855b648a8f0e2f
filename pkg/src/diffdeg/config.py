"""Structured run configuration: defaults, validation with key paths, object builders."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Optional

import yaml

from .attack import Chain, DataChannelBlock, FixedDelay, FrameDrop, UniformPacketLoss, policy_name
from .synth import Adaptive, NonAdaptive, ResolutionProfile, StreamSpec, default_profiles


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


DEFAULTS: dict = {
    "seed": 0,
    "profiles": None,
    "attack": {
        "chain": [],
        "shards": 1,
        "threads": 1,
        "table_capacity": 65536,
        "ssrc_slots": 8,
    },
    "synth": {
        "scenario": "video",
        "duration_s": 10.0,
        "issuer": "WebRTC",
        "fragment_at": None,
        "app_data_packets": 200,
        "audio": False,
        "source": {"kind": "non_adaptive", "profile": "1080p", "ladder": ["1080p", "540p"],
                   "downshift_loss_threshold": 0.10, "window_s": 2.0},
        "stream": {"ssrc": 0x1234ABCD, "payload_type": 102, "mtu_payload_bytes": 1200,
                   "keyframe_interval": 0, "keyframe_scale": 1.0},
        "flows": 1000,
        "packets": 100000,
    },
    "sim": {
        "duration_s": 300.0,
        "rates": [0.0, 0.05, 0.15, 0.25],
        "attack": "frame_drop",
        "delay_ms": 0,
        "qos_recovery": 0.0,
        "settle_windows": 1,
        "covert": {"message_bytes": 1500, "retransmit_timeout_ms": 1000.0, "rto_backoff": 2.0,
                   "rto_cap_ms": 60000.0, "window_messages": 4, "carrier_profile": "1080p"},
        "video": {"kind": "adaptive", "profile": "1080p", "ladder": ["1080p", "540p"],
                  "downshift_loss_threshold": 0.10, "window_s": 2.0},
    },
    "detect": {
        "threshold": 0.20,
        "min_frames": 50,
        "pt_set": [102, 77],
        "hist_width": 500,
        "hist_max": 50000,
        "marker_only": False,
        "rate": 0.25,
        "baseline_s": 10.0,
        "attack_s": 15.0,
    },
}

_POLICY_KEYS = {
    "data_channel_block": {"issuer_match", "match_mode"},
    "frame_drop": {"rate", "seed", "pt_set", "mode", "marker_only", "require_flag"},
    "uniform_packet_loss": {"rate", "seed"},
    "fixed_delay": {"delay_ms", "from_addrs"},
}


def load_document(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        doc = json.loads(text)
    else:
        doc = yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("", "config document must be a mapping")
    return doc


def _merge(base: Any, override: Any, path: str) -> Any:
    if isinstance(base, dict):
        if not isinstance(override, dict):
            raise ConfigError(path, "expected a mapping")
        out = dict(base)
        for key, value in override.items():
            sub = f"{path}.{key}" if path else str(key)
            if key not in base:
                raise ConfigError(sub, "unknown key")
            out[key] = _merge(base[key], value, sub)
        return out
    return copy.deepcopy(override)


def resolve(doc: Optional[dict] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults <- file document <- CLI overrides, rejecting unknown keys."""
    cfg = _merge(DEFAULTS, doc or {}, "")
    for dotted, value in (overrides or {}).items():
        cfg = _merge(cfg, _nest(dotted, value), "")
    validate(cfg)
    return cfg


def _nest(dotted: str, value: Any) -> dict:
    out: Any = value
    for part in reversed(dotted.split(".")):
        out = {part: out}
    return out


def parse_assignment(text: str) -> tuple:
    """``a.b=value`` with a YAML scalar/list value."""
    if "=" not in text:
        raise ConfigError(text, "expected key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _num(cfg: dict, key: str, path: str, lo=None, hi=None, integer=False, allow_none=False):
    value = cfg[key]
    where = f"{path}.{key}"
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(where, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(where, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(where, f"must be <= {hi}, got {value}")


def validate(cfg: dict) -> None:
    _num(cfg, "seed", "", 0, 2**64 - 1, integer=True)
    build_profiles(cfg)
    build_chain(cfg["attack"]["chain"], cfg["seed"])
    a = cfg["attack"]
    for key in ("shards", "threads", "table_capacity", "ssrc_slots"):
        _num(a, key, "attack", 1, integer=True)
    s = cfg["synth"]
    if s["scenario"] not in ("video", "snowflake", "pair", "stress", "dtls"):
        raise ConfigError("synth.scenario", f"unknown scenario {s['scenario']!r}")
    _num(s, "duration_s", "synth", 0)
    _num(s, "fragment_at", "synth", 1, integer=True, allow_none=True)
    _num(s, "app_data_packets", "synth", 0, integer=True)
    _num(s, "flows", "synth", 1, integer=True)
    _num(s, "packets", "synth", 1, integer=True)
    _source(s["source"], "synth.source", cfg)
    try:
        build_stream(cfg)
    except ValueError as exc:
        raise ConfigError("synth.stream", str(exc)) from None
    m = cfg["sim"]
    _num(m, "duration_s", "sim", 0)
    if not isinstance(m["rates"], list) or not m["rates"]:
        raise ConfigError("sim.rates", "expected a non-empty list")
    for i, r in enumerate(m["rates"]):
        if isinstance(r, bool) or not isinstance(r, (int, float)) or not 0 <= r <= 1:
            raise ConfigError(f"sim.rates[{i}]", f"rate must be within [0, 1], got {r!r}")
    if m["attack"] not in ("frame_drop", "uniform_packet_loss"):
        raise ConfigError("sim.attack", f"unknown attack {m['attack']!r}")
    _num(m, "delay_ms", "sim", 0, integer=True)
    _num(m, "qos_recovery", "sim", 0, 1)
    _num(m, "settle_windows", "sim", 0, integer=True)
    try:
        build_covert(cfg)
    except (ValueError, KeyError) as exc:
        raise ConfigError("sim.covert", str(exc)) from None
    _source(m["video"], "sim.video", cfg)
    d = cfg["detect"]
    _num(d, "threshold", "detect", 0, 1)
    _num(d, "min_frames", "detect", 0, integer=True)
    _num(d, "hist_width", "detect", 1, integer=True)
    _num(d, "hist_max", "detect", 1, integer=True)
    _num(d, "rate", "detect", 0, 1)
    _num(d, "baseline_s", "detect", 0)
    _num(d, "attack_s", "detect", 0)
    _pt_set(d["pt_set"], "detect.pt_set")


def _pt_set(value, path):
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(path, "expected a non-empty list of payload types")
    for i, pt in enumerate(value):
        if isinstance(pt, bool) or not isinstance(pt, int) or not 0 <= pt <= 127:
            raise ConfigError(f"{path}[{i}]", f"payload type must be 0..127, got {pt!r}")
    return frozenset(value)


def build_profiles(cfg: dict) -> list:
    raw = cfg.get("profiles")
    if raw is None:
        return default_profiles()
    if not isinstance(raw, list) or not raw:
        raise ConfigError("profiles", "expected a non-empty list")
    out = []
    for i, entry in enumerate(raw):
        path = f"profiles[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(path, "expected a mapping")
        allowed = {"name", "mean_frame_bytes", "frame_bytes_stdev", "fps", "width", "height"}
        for key in entry:
            if key not in allowed:
                raise ConfigError(f"{path}.{key}", "unknown key")
        try:
            out.append(ResolutionProfile(**entry))
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from None
    return out


def _find_profile(name: str, cfg: dict, path: str) -> ResolutionProfile:
    for p in build_profiles(cfg):
        if p.name == name:
            return p
    raise ConfigError(path, f"unknown profile {name!r}")


def _source(src: dict, path: str, cfg: dict):
    kind = src["kind"]
    if kind == "non_adaptive":
        return NonAdaptive(_find_profile(src["profile"], cfg, f"{path}.profile"), float(src["window_s"]))
    if kind == "adaptive":
        if not isinstance(src["ladder"], list):
            raise ConfigError(f"{path}.ladder", "expected a list of profile names")
        ladder = [_find_profile(n, cfg, f"{path}.ladder[{i}]") for i, n in enumerate(src["ladder"])]
        try:
            return Adaptive(tuple(ladder), float(src["downshift_loss_threshold"]), float(src["window_s"]))
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.kind", f"unknown source kind {kind!r}")


def build_source(cfg: dict, section: str = "synth"):
    key = "source" if section == "synth" else "video"
    return _source(cfg[section][key], f"{section}.{key}", cfg)


def build_stream(cfg: dict, **overrides) -> StreamSpec:
    st = cfg["synth"]["stream"]
    return StreamSpec(ssrc=int(st["ssrc"]), payload_type=int(st["payload_type"]),
                      mtu_payload_bytes=int(st["mtu_payload_bytes"]), duration_s=float(cfg["synth"]["duration_s"]),
                      seed=int(cfg["seed"]), keyframe_interval=int(st["keyframe_interval"]),
                      keyframe_scale=float(st["keyframe_scale"]), **overrides)


def build_covert(cfg: dict):
    from .sim import CovertChannelModel
    c = cfg["sim"]["covert"]
    carrier = NonAdaptive(_find_profile(c["carrier_profile"], cfg, "sim.covert.carrier_profile"))
    return CovertChannelModel(int(c["message_bytes"]), float(c["retransmit_timeout_ms"]), float(c["rto_backoff"]),
                              float(c["rto_cap_ms"]), int(c["window_messages"]), carrier)


def policy_from_dict(entry: dict, path: str, default_seed: int = 0):
    if not isinstance(entry, dict):
        raise ConfigError(path, "expected a mapping")
    kind = entry.get("type")
    if kind not in _POLICY_KEYS:
        raise ConfigError(f"{path}.type", f"unknown policy type {kind!r}")
    params = {k: v for k, v in entry.items() if k != "type"}
    for key in params:
        if key not in _POLICY_KEYS[kind]:
            raise ConfigError(f"{path}.{key}", "unknown key")
    for key in ("rate",):
        if key in params:
            v = params[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 1:
                raise ConfigError(f"{path}.{key}", f"rate must be within [0, 1], got {v!r}")
    if "pt_set" in params:
        params["pt_set"] = _pt_set(params["pt_set"], f"{path}.pt_set")
    if kind in ("frame_drop", "uniform_packet_loss"):
        params.setdefault("seed", default_seed)
    cls = {"data_channel_block": DataChannelBlock, "frame_drop": FrameDrop,
           "uniform_packet_loss": UniformPacketLoss, "fixed_delay": FixedDelay}[kind]
    if "rate" not in params and kind in ("frame_drop", "uniform_packet_loss"):
        raise ConfigError(f"{path}.rate", "required")
    if "delay_ms" not in params and kind == "fixed_delay":
        raise ConfigError(f"{path}.delay_ms", "required")
    try:
        return cls(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def build_chain(raw, seed: int = 0) -> Optional[Chain]:
    if not isinstance(raw, list):
        raise ConfigError("attack.chain", "expected a list of policies")
    if not raw:
        return None
    policies = tuple(policy_from_dict(e, f"attack.chain[{i}]", seed) for i, e in enumerate(raw))
    try:
        return Chain(policies)
    except ValueError as exc:
        raise ConfigError("attack.chain", str(exc)) from None


def policy_to_dict(policy) -> dict:
    out = {"type": policy_name(policy)}
    if isinstance(policy, DataChannelBlock):
        out.update(issuer_match=policy.issuer_match, match_mode=policy.match_mode)
    elif isinstance(policy, FrameDrop):
        out.update(rate=policy.rate, seed=policy.seed, pt_set=sorted(policy.pt_set), mode=policy.mode,
                   marker_only=policy.marker_only, require_flag=policy.require_flag)
    elif isinstance(policy, UniformPacketLoss):
        out.update(rate=policy.rate, seed=policy.seed)
    else:
        out.update(delay_ms=policy.delay_ms,
                   from_addrs=sorted(policy.from_addrs) if policy.from_addrs is not None else None)
    return out
