"""Run configuration: flat INI-style sections with typed, defaulted
keys, rejected unknowns, line-numbered parse errors, and a canonical
byte-stable rendering used for hashing and run records."""

import hashlib

from .errors import ConfigError

# section -> key -> default; the type of the default fixes the parser.
SCHEMA = {
    "data": {
        "n": 64,
        "seed": 1,
        "dims": (32, 32, 32),
        "organ_radii": (10, 14),
        "lesion_radii": (3, 6),
    },
    "vae": {
        "steps": 2000,
        "lr": 2e-3,
        "batch": 2,
        "beta": 1e-4,
        "seed": 0,
    },
    "flow": {
        "steps": 3000,
        "lr": 1e-3,
        "batch": 4,
        "lambda1": 1.0,
        "lambda2": 0.5,
        "lambda3": 1.0,
        "alpha": 0.15,
        "include_box_channel": True,
        "joint_rec": False,
        "t_law": "uniform",
        "seed": 0,
    },
    "refiner": {
        "steps": 1000,
        "lr": 3e-3,
        "batch": 2,
        "alpha": 0.15,
        "seed": 0,
    },
    "segmenter": {
        "steps": 2000,
        "lr": 5e-3,
        "batch": 2,
        "seed": 0,
    },
    "sampler": {
        "steps": 10,
        "step_list": (10, 50),
        "auto_edge_lo": 8,
        "auto_edge_hi": 16,
        "threshold": 0.5,
        "composite": True,
        "seed": 0,
    },
    "metrics": {
        "tau": 1.0,
        "extractor_seed": 7,
    },
}

SECTION_ORDER = ("data", "vae", "flow", "refiner", "segmenter", "sampler",
                 "metrics")


def _parse_value(raw, default, where):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError("%s: expected a boolean, got %r" % (where, raw))
    if isinstance(default, tuple):
        elem = default[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError("%s: expected a comma-separated list" % where)
        try:
            return tuple(type(elem)(p) for p in parts)
        except ValueError:
            raise ConfigError("%s: bad list element in %r" % (where, raw))
    if isinstance(default, int):
        try:
            return int(raw.strip())
        except ValueError:
            raise ConfigError("%s: expected an integer, got %r"
                              % (where, raw))
    if isinstance(default, float):
        try:
            return float(raw.strip())
        except ValueError:
            raise ConfigError("%s: expected a number, got %r" % (where, raw))
    return raw.strip()


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """All knobs for a run; defaults from SCHEMA, overridden per file."""

    def __init__(self, values=None):
        self.sections = {s: dict(SCHEMA[s]) for s in SECTION_ORDER}
        for (sec, key), val in (values or {}).items():
            self.sections[sec][key] = val

    def __getitem__(self, section):
        return self.sections[section]

    def canonical(self):
        """Byte-stable rendering: fixed section and key order."""
        lines = []
        for sec in SECTION_ORDER:
            lines.append("[%s]" % sec)
            for key in SCHEMA[sec]:
                lines.append("%s = %s"
                             % (key, _format_value(self.sections[sec][key])))
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def train_config(self, section):
        """Dataclass for one training stage, built from its section."""
        from .flow import FlowTrainConfig
        from .refiner import RefinerTrainConfig
        from .segmenter import SegTrainConfig
        from .vae import VaeTrainConfig
        cls = {"vae": VaeTrainConfig, "flow": FlowTrainConfig,
               "refiner": RefinerTrainConfig,
               "segmenter": SegTrainConfig}[section]
        return cls(**self.sections[section])


def parse_config(text):
    """Parse INI-style text into a RunConfig; unknown sections or keys
    and malformed lines are ConfigErrors carrying the line number."""
    values = {}
    section = None
    for num, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("line %d: unterminated section header"
                                  % num)
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError("line %d: unknown section [%s]"
                                  % (num, section))
            continue
        if "=" not in stripped:
            raise ConfigError("line %d: expected key = value" % num)
        if section is None:
            raise ConfigError("line %d: key outside any section" % num)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError("line %d: unknown key %r in section [%s]"
                              % (num, key, section))
        values[(section, key)] = _parse_value(
            raw, SCHEMA[section][key], "line %d" % num)
    return RunConfig(values)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e))
    return parse_config(text)
