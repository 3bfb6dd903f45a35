"""Flat key=value run configuration, run manifests and the keyed results table."""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from .errors import ParameterError


class ConfigError(ParameterError):
    """Bad configuration: unknown keys, unparsable values, missing paths."""


def parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_floats(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(float(x) for x in s)
    return tuple(float(x) for x in str(s).split(",") if x.strip())


def parse_ints(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


@dataclass(frozen=True)
class Option:
    """One setting. ``path``: "in" must exist, "out" gets its parent created, "outdir" is created."""

    parse: Callable[[Any], Any]
    default: Any
    help: str = ""
    path: Optional[str] = None
    required: bool = False


def read_config_file(path) -> dict:
    """``key = value`` lines; '#' starts a comment. Keys may use '-' or '_'."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


class RunConfig(Mapping):
    """Validated settings for one command: defaults < config file < command-line overrides."""

    def __init__(self, schema: Mapping[str, Option], values: Mapping[str, Any] = (),
                 overrides: Mapping[str, Any] = ()):
        self.schema = dict(schema)
        merged = {}
        for source in (dict(values), dict(overrides)):
            unknown = sorted(set(source) - set(self.schema))
            if unknown:
                raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
            merged.update(source)
        self._values = {}
        for key, opt in self.schema.items():
            raw = merged.get(key, opt.default)
            if raw is None or raw == "":
                if opt.required:
                    raise ConfigError(f"missing required setting {key!r}")
                self._values[key] = None
                continue
            try:
                self._values[key] = opt.parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None

    @classmethod
    def load(cls, schema, config_file=None, overrides=()) -> "RunConfig":
        values = read_config_file(config_file) if config_file else {}
        return cls(schema, values, overrides)

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def check_paths(self) -> None:
        """Fail before any work if inputs are missing; create output parents."""
        for key, opt in self.schema.items():
            value = self._values[key]
            if not value or opt.path is None:
                continue
            p = Path(value)
            if opt.path == "in" and not p.exists():
                raise ConfigError(f"{key}: {p} does not exist")
            if opt.path == "out":
                p.parent.mkdir(parents=True, exist_ok=True)
            if opt.path == "outdir":
                p.mkdir(parents=True, exist_ok=True)

    def lines(self) -> list[str]:
        return [f"{k}={format_value(v)}" for k, v in self._values.items()]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(paths: Iterable) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        out += sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p]
    return out


def write_manifest(path, command: str, cfg: RunConfig, inputs: Iterable = (), outputs: Iterable = ()) -> None:
    """Deterministic text manifest: settings plus content hashes of every input and output file."""
    lines = [f"command={command}"] + cfg.lines()
    lines += [f"input:{p}=sha256:{sha256_file(p)}" for p in _files(inputs)]
    lines += [f"output:{p}=sha256:{sha256_file(p)}" for p in _files(outputs)]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            key, sep, val = line.rstrip("\n").partition("=")
            if sep:
                out[key] = val
    return out


def write_keyvalues(path, values: Mapping[str, Any]) -> None:
    _atomic_write(path, "".join(f"{k}={format_value(v)}\n" for k, v in values.items()))


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


RESULT_KEY = ("source", "target", "nsl", "nin", "seed")


def upsert_result(path, row: Mapping[str, Any], key=RESULT_KEY) -> None:
    """Insert ``row`` into the CSV at ``path``, replacing any row with the same key."""
    path = Path(path)
    rows, fields = [], list(row)
    if path.exists() and path.stat().st_size:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            fields = list(reader.fieldnames or []) + [k for k in row if k not in (reader.fieldnames or [])]
            rows = list(reader)
    new = {k: format_value(v) for k, v in row.items()}
    ident = tuple(new[k] for k in key)
    for i, r in enumerate(rows):
        if tuple(r.get(k, "") for k in key) == ident:
            rows[i] = new
            break
    else:
        rows.append(new)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, restval="")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)
