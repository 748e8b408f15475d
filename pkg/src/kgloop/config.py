"""Flat text configuration covering the loop and the corpus generator.

One `key = value` per line, `#` starts a comment. Loop scalars use bare
keys, the nested bundles use dotted prefixes (mcts.budget, train.dim,
detector.epochs, expand.min_count), generator fields live under synth.*.
Entity lists are comma-separated entries whose fields are colon-joined, so
surfaces may contain spaces. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .loop import LoopConfig
from .synth import SynthConfig

SECTIONS = ("mcts", "train", "detector", "expand")


@dataclass
class RunConfig:
    loop: LoopConfig
    synth: SynthConfig


def default_config() -> RunConfig:
    return RunConfig(LoopConfig(), SynthConfig())


def with_seed(run: RunConfig, seed: int) -> RunConfig:
    """Point every seeded stream at one master seed."""
    run.loop.seed = seed
    run.loop.mcts.seed = seed
    run.synth.seed = seed
    return run


def _coerce(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            raise TypeError("no boolean config fields")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ValueError(f"bad value for {key}: {value!r}") from None
    raise ValueError(f"unknown config key {key!r}")


def _entries(key: str, value: str, arity: int) -> list[tuple[str, ...]]:
    out = []
    for chunk in value.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(":")]
        if len(parts) != arity:
            raise ValueError(
                f"bad entry for {key}: {chunk!r} (want {arity} colon-joined fields)"
            )
        out.append(tuple(parts))
    return out


def _parse_list(target, name: str, key: str, value: str) -> None:
    try:
        if name == "signal":
            target.signal = tuple(
                (s, float(a), float(b)) for s, a, b in _entries(key, value, 3)
            )
        elif name == "common":
            target.common = tuple(
                (s, float(a)) for s, a in _entries(key, value, 2)
            )
        elif name == "emergent":
            target.emergent = tuple(
                (s, int(a), float(b)) for s, a, b in _entries(key, value, 3)
            )
        else:
            target.filler = tuple(
                w.strip() for w in value.split(",") if w.strip()
            )
    except ValueError as err:
        if "bad entry" in str(err):
            raise
        raise ValueError(f"bad value for {key}: {value!r}") from None


def _assign(run: RunConfig, key: str, value: str) -> None:
    if key.startswith("synth."):
        target, name = run.synth, key[len("synth."):]
        if name in ("signal", "common", "emergent", "filler"):
            _parse_list(target, name, key, value)
            return
    elif "." in key:
        prefix, name = key.split(".", 1)
        if prefix not in SECTIONS or "." in name:
            raise ValueError(f"unknown config key {key!r}")
        target = getattr(run.loop, prefix)
    else:
        target, name = run.loop, key
    known = {f.name for f in fields(target)} - set(SECTIONS)
    if name not in known:
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(key, value, getattr(target, name)))


def parse_config(text: str) -> RunConfig:
    run = default_config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        _assign(run, key.strip(), value.strip())
    run.loop.validate()
    run.synth.validate()
    return run


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _list_lines(synth: SynthConfig) -> list[str]:
    return [
        "synth.signal = " + ", ".join(
            f"{s}:{_fmt(a)}:{_fmt(b)}" for s, a, b in synth.signal
        ),
        "synth.common = " + ", ".join(
            f"{s}:{_fmt(a)}" for s, a in synth.common
        ),
        "synth.emergent = " + ", ".join(
            f"{s}:{o}:{_fmt(r)}" for s, o, r in synth.emergent
        ),
        "synth.filler = " + ", ".join(synth.filler),
    ]


def format_config(run: RunConfig) -> str:
    lines = ["# closed-loop run configuration"]
    for f in fields(run.loop):
        if f.name in SECTIONS:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(run.loop, f.name))}")
    for section in SECTIONS:
        bundle = getattr(run.loop, section)
        for f in fields(bundle):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(bundle, f.name))}")
    for f in fields(run.synth):
        if f.name in ("signal", "common", "emergent", "filler"):
            continue
        lines.append(f"synth.{f.name} = {_fmt(getattr(run.synth, f.name))}")
    lines.extend(_list_lines(run.synth))
    return "\n".join(lines) + "\n"


def save_config(run: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(run))
