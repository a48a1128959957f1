"""Parameter files and run manifests.

A parameter file is a small header followed by little-endian float64 values:

    magic   8 bytes   b"SYMRLNN1"
    kind    u32       0 = plain network, 1 = Gaussian policy (log-std appended)
    act     u32       index into ACTIVATIONS
    layers  u32       number of layer sizes, followed by that many u32 sizes
    bound   f64       MlpParams.output_bound (0 = linear output)
    values  f64[...]  MlpParams.flat() order, then log-std for policies
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, LoadError
from .learner import TrainConfig
from .numkit import ACTIVATIONS, GaussianPolicy, MlpParams

MAGIC = b"SYMRLNN1"
_KIND_NET, _KIND_POLICY = 0, 1


def _encode(net: MlpParams, kind: int, extra: np.ndarray | None = None) -> bytes:
    sizes = list(net.layer_sizes)
    header = MAGIC + struct.pack(f"<3I{len(sizes)}Id", kind, ACTIVATIONS.index(net.activation),
                                 len(sizes), *sizes, net.output_bound)
    values = net.flat() if extra is None else np.concatenate([net.flat(), extra])
    return header + values.astype("<f8").tobytes()


def _decode(data: bytes, path) -> tuple[int, MlpParams, np.ndarray]:
    if data[:8] != MAGIC:
        raise LoadError(f"{path}: not a parameter file (bad magic)")
    try:
        kind, act, n = struct.unpack_from("<3I", data, 8)
        *sizes, bound = struct.unpack_from(f"<{n}Id", data, 20)
    except struct.error as exc:
        raise LoadError(f"{path}: truncated header") from exc
    if act >= len(ACTIVATIONS) or kind not in (_KIND_NET, _KIND_POLICY) or n < 2:
        raise LoadError(f"{path}: corrupt header")
    start = 28 + 4 * n
    if (len(data) - start) % 8:
        raise LoadError(f"{path}: value section is not a whole number of float64s")
    values = np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64)
    expected = sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))
    if expected > len(values):     # reject before allocating anything from a corrupt header
        raise LoadError(f"{path}: expected at least {expected} values, found {len(values)}")
    try:
        template = MlpParams.zeros(sizes, ACTIVATIONS[act], bound)
    except ConfigurationError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    extra = sizes[-1] if kind == _KIND_POLICY else 0
    if len(values) != template.n_params + extra:
        raise LoadError(f"{path}: expected {template.n_params + extra} values, found {len(values)}")
    return kind, template.with_flat(values[:template.n_params]), values[template.n_params:]


def save_policy(path, policy: GaussianPolicy) -> None:
    Path(path).write_bytes(_encode(policy.mean_net, _KIND_POLICY, policy.log_std))


def load_policy(path) -> GaussianPolicy:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    kind, net, log_std = _decode(data, path)
    if kind != _KIND_POLICY:
        raise LoadError(f"{path}: holds a plain network, not a policy")
    return GaussianPolicy(net, log_std)


def save_network(path, net: MlpParams) -> None:
    Path(path).write_bytes(_encode(net, _KIND_NET))


def load_network(path) -> MlpParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    kind, net, _ = _decode(data, path)
    if kind != _KIND_NET:
        raise LoadError(f"{path}: holds a policy, not a plain network")
    return net


def config_to_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["hidden_sizes"] = list(config.hidden_sizes)
    return out


def config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - set(TrainConfig.field_names())
    if unknown:
        raise LoadError(f"manifest has unknown config keys: {', '.join(sorted(unknown))}")
    data = dict(data)
    if "hidden_sizes" in data:
        data["hidden_sizes"] = tuple(data["hidden_sizes"])
    return TrainConfig(**data)


def write_manifest(path, config: TrainConfig, **extra) -> None:
    body = {"config": config_to_dict(config), **extra}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[TrainConfig, dict]:
    try:
        body = json.loads(Path(path).read_text())
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc.msg})") from exc
    if "config" not in body:
        raise LoadError(f"{path}: no config section")
    return config_from_dict(body["config"]), body
