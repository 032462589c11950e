"""Flat ``key = value`` scenario files.

Lines are ``key = value``; ``#`` starts a comment; dotted keys nest
(``delay.prop = uniform 2000 6000``). Unknown keys are rejected. Faults are
numbered keys, ``fault.1 = <time> <action> <args...>``, where delay-model
arguments are separated by ``|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .harness import AXES, FAULT_ACTIONS, ConfigError, Fault, Scenario, default_delay
from .netsim import parse_distribution

_INT = {"replicas", "clients", "think_time", "client_delay", "client_timeout", "round_length",
        "duration", "warmup", "proposer_count", "batch_cap", "rx_capacity", "coord_rounds",
        "suspect_rounds", "candidacy_jitter", "progress_bound"}
_BOOL = {"early_exit", "ideal", "check"}
_OTHER = {"protocol", "mutations", "seed", "seeds", "out", "trace", "verbosity",
          "delay.prop", "delay.proc", "delay.drop_rate", "sweep.axis", "sweep.values"}


@dataclass
class Config:
    scenario: Scenario
    seed: int = 0
    seeds: int = 1
    out: str | None = None
    trace: bool = False
    verbosity: int = 0
    sweep_axis: str | None = None
    sweep_values: list = field(default_factory=list)


def _bool(key, v):
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _int(key, v):
    try:
        n = int(v.replace("_", ""))
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None
    if n < 0:
        raise ConfigError(f"{key}: must be non-negative")
    return n


def _ids(text):
    return tuple(int(x) for x in text.split(",") if x)


def parse_fault(key, text) -> Fault:
    parts = text.split(None, 2)
    if len(parts) < 2:
        raise ConfigError(f"{key}: expected '<time> <action> [args]'")
    t = _int(key, parts[0])
    action = parts[1]
    rest = parts[2] if len(parts) > 2 else ""
    if action not in FAULT_ACTIONS:
        raise ConfigError(f"{key}: unknown fault action {action!r}")
    try:
        if action == "crash":
            args = (int(rest),)
        elif action == "partition":
            a, b, until = rest.split()
            args = (_ids(a), _ids(b), int(until))
        elif action == "set-drop-rate":
            args = (float(rest),)
        elif action == "set-delay-model":
            prop, proc = (p.strip() for p in rest.split("|"))
            parse_distribution(prop)
            parse_distribution(proc)
            args = (prop, proc)
        else:
            if rest.strip() not in ("pulsing", "responsive"):
                raise ValueError(f"unknown mode {rest!r}")
            args = (rest.strip(),)
    except ValueError as exc:
        raise ConfigError(f"{key}: bad arguments for {action}: {exc}") from None
    return Fault(t, action, args)


def parse_config(text: str, source: str = "<config>") -> Config:
    sc = Scenario()
    sc.delay = default_delay()
    cfg = Config(sc)
    seen = set()
    faults = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value'")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        try:
            _apply(cfg, key, value, faults)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"{where}: {key}: {exc}") from None
    sc.faults = sorted(faults, key=lambda f: f.time)
    if cfg.sweep_axis is not None and not cfg.sweep_values:
        raise ConfigError(f"{source}: sweep.axis given without sweep.values")
    sc.validate()
    return cfg


def _apply(cfg: Config, key: str, value: str, faults: list):
    sc = cfg.scenario
    if key.startswith("fault."):
        faults.append(parse_fault(key, value))
    elif key.startswith("delay.link."):
        try:
            a, b = (int(x) for x in key[len("delay.link."):].split("."))
        except ValueError:
            raise ConfigError(f"{key}: expected delay.link.<src>.<dst>") from None
        sc.delay.links[(a, b)] = parse_distribution(value)
    elif key in _INT:
        setattr(sc, key, _int(key, value))
    elif key in _BOOL:
        setattr(sc, key, _bool(key, value))
    elif key not in _OTHER:
        raise ConfigError(f"unknown key {key!r}")
    elif key == "protocol":
        sc.protocol = value
    elif key == "mutations":
        sc.mutations = tuple(m.strip() for m in value.split(",") if m.strip())
    elif key == "delay.prop":
        sc.delay.prop = parse_distribution(value)
    elif key == "delay.proc":
        sc.delay.proc = parse_distribution(value)
    elif key == "delay.drop_rate":
        p = float(value)
        if not 0 <= p <= 1:
            raise ConfigError("delay.drop_rate outside [0, 1]")
        sc.delay.drop_rate = p
    elif key == "seed":
        cfg.seed = _int(key, value)
    elif key == "seeds":
        cfg.seeds = max(1, _int(key, value))
    elif key == "out":
        cfg.out = value
    elif key == "trace":
        cfg.trace = _bool(key, value)
    elif key == "verbosity":
        cfg.verbosity = _int(key, value)
    elif key == "sweep.axis":
        if value not in AXES:
            raise ConfigError(f"sweep.axis must be one of {AXES}")
        cfg.sweep_axis = value
    elif key == "sweep.values":
        cfg.sweep_values = [_int(key, v.strip()) for v in value.split(",") if v.strip()]


def load_config(path) -> Config:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
