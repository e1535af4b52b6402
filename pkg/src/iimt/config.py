"""Flat key=value configuration files with dataclass-typed coercion.

One file configures a whole run; keys may be namespaced with a dot prefix
(for example ``train.lr`` or ``tokenizer.codebook_size``) and are applied
onto the matching dataclass. Precedence is flags over file over defaults,
and every command echoes its effective configuration into its output
directory.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Dict, Optional

from .errors import ConfigError


def load_kv(path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, mapping: Dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {mapping[k]}" for k in sorted(mapping)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def apply_namespace(instance, kv: Dict[str, str], namespace: str,
                    consumed: Optional[set] = None):
    """Apply ``namespace.field`` (or bare ``field``) keys onto a dataclass.

    ``consumed`` collects the keys that matched, so callers can reject
    config keys no namespace recognized.
    """
    known = {f.name: f for f in dataclasses.fields(instance)}
    for key, value in kv.items():
        if "." in key:
            space, name = key.split(".", 1)
            if space != namespace:
                continue
            if name not in known:
                raise ConfigError(f"unknown config key '{key}' for {namespace}")
        else:
            name = key
            if name not in known:
                continue
        f = known[name]
        base = f.type if isinstance(f.type, type) else type(getattr(instance, name))
        try:
            setattr(instance, name, _coerce(value, base))
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from exc
        if consumed is not None:
            consumed.add(key)
    return instance


def namespace_keys(kv: Dict[str, str], namespace: str) -> Dict[str, str]:
    prefix = namespace + "."
    return {k[len(prefix):]: v for k, v in kv.items() if k.startswith(prefix)}


def effective_config(instances: Dict[str, object], extra: Optional[Dict] = None) -> Dict[str, str]:
    """Flatten dataclass instances back into namespaced key=value pairs."""
    out: Dict[str, str] = {}
    for namespace, inst in instances.items():
        for f in dataclasses.fields(inst):
            out[f"{namespace}.{f.name}"] = repr(getattr(inst, f.name)) \
                if isinstance(getattr(inst, f.name), tuple) else str(getattr(inst, f.name))
    for k, v in (extra or {}).items():
        out[str(k)] = str(v)
    return out
