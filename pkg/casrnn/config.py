"""Run configuration: a flat ``key = value`` file.

Values use Python literal syntax (numbers, quoted strings, lists, tuples)
plus ``null``, ``true`` and ``false``; string fields may also be written
bare (``variant = cas-f``). Lines starting with ``#`` and blank lines are
ignored. Only values that differ from the defaults (after the preset) need
to be given.
"""

import ast
import logging

from casrnn.spatial import DEFAULT_CONV_SPECS


logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unknown keys and invalid values; ``key`` names the field."""
    def __init__(self, key, message):
        ValueError.__init__(self, "{}: {}".format(key, message))
        self.key = key


VARIANTS = ("rnn", "cas", "cas-f", "cas-o", "sscas")


# (name, type, default, help)
FIELDS = (
    ("variant", "str", "cas", "model variant: " + ", ".join(VARIANTS)),
    ("preset", "str", None, "dataset preset"),
    ("cube", "str", None, "HSC1 cube file; synthesize data when unset"),
    ("labels", "str", None, "HSL1 label file"),
    ("split", "str", None, "split CSV; drawn from train_counts when unset"),
    ("synth_kind", "str", "spectral", "synthetic data: spectral or spatial"),
    ("synth_classes", "int", 5, "synthetic class count"),
    ("synth_bands", "int", 40, "synthetic band count"),
    ("synth_height", "int", 55, "synthetic image height"),
    ("synth_width", "int", 50, "synthetic image width"),
    ("synth_redundancy", "int", 4, "width of redundant band groups"),
    ("synth_noise", "float", 0.05, "synthetic pixel noise deviation"),
    ("synth_seed", "int", 0, "synthetic data seed"),
    ("train_counts", "ints", None, "training pixels per class"),
    ("train_per_class", "int", 50, "training pixels per class when "
                                   "train_counts is unset"),
    ("normalize", "str", "full", "band scaling fit: full, train or none"),
    ("l", "int", 10, "number of band sub-sequences"),
    ("hidden1", "int", 128, "first-layer GRU size"),
    ("hidden2", "int", 256, "second-layer GRU size"),
    ("patch", "int", 27, "patch size (sscas)"),
    ("conv_specs", "specs", DEFAULT_CONV_SPECS,
     "conv layers as (kh, kw, channels) (sscas)"),
    ("conv_activation", "str", "tanh", "conv activation (sscas)"),
    ("lr", "float", 0.001, "learning rate"),
    ("batch", "int", 64, "mini-batch size"),
    ("epochs", "int", 300, "training epochs"),
    ("learn_output_weights", "bool", True,
     "update the cas-o fusion weights by SGD"),
    ("seed", "int", 0, "seed of initialization, split and shuffling"),
    ("stage_a", "int", 100, "CNN pretraining epochs (sscas)"),
    ("stage_b", "int", 100, "frozen-CNN cascade epochs (sscas)"),
    ("stage_c", "int", 100, "fine-tuning epochs (sscas)"),
    ("output_dir", "str", "out", "directory for all artifacts"),
)

_field_types = {name: ty for name, ty, _, _ in FIELDS}
_optional = {name for name, _, default, _ in FIELDS if default is None}
_SSCAS_ONLY = ("patch", "conv_specs", "conv_activation",
               "stage_a", "stage_b", "stage_c")


PRESETS = {
    "indian-pines": {
        "classes": 16,
        "bands": 200,
        "train_counts": [50]*13 + [15]*3,
        "default": {"l": 10, "hidden1": 128, "hidden2": 256},
        "sscas": {"l": 10, "hidden1": 128, "hidden2": 256},
    },
    "pavia-university": {
        "classes": 9,
        "bands": 103,
        "train_counts": [548, 540, 392, 524, 265, 532, 375, 514, 231],
        "default": {"l": 8, "hidden1": 256, "hidden2": 16},
        "sscas": {"l": 4, "hidden1": 256, "hidden2": 256},
    },
}


def _keyword(text):
    return {"null": None, "true": True, "false": False}.get(text, text)


def decode_value(key, text):
    """Parses the text of field ``key`` into a Python value."""
    if key not in _field_types:
        raise ConfigError(key, "unknown configuration key")
    text = text.strip()
    ty = _field_types[key]
    if text in ("null", "None"):
        if key not in _optional:
            raise ConfigError(key, "a value is required")
        return None
    if ty == "str" and text[:1] not in ("\"", "'"):
        return text
    if text in ("true", "false"):
        value = _keyword(text)
    else:
        try:
            value = ast.literal_eval(text)
        except (ValueError, SyntaxError):
            raise ConfigError(key, "cannot parse {!r}".format(text)) from None
    return _coerce(key, ty, value)


def _coerce(key, ty, value):
    if value is None:
        return None
    try:
        if ty == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        elif ty == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        elif ty == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        elif ty == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        elif ty == "ints":
            if not all(isinstance(v, int) and not isinstance(v, bool)
                       for v in value):
                raise TypeError
            return [int(v) for v in value]
        elif ty == "specs":
            specs = tuple(tuple(s) for s in value)
            if not all(len(s) == 3 and all(isinstance(v, int) for v in s)
                       for s in specs):
                raise TypeError
            return specs
    except TypeError:
        raise ConfigError(key, "expected {}, got {!r}"
                          .format(ty, value)) from None
    raise AssertionError(ty)


def encode_value(value):
    if value is None:
        return "null"
    elif value is True:
        return "true"
    elif value is False:
        return "false"
    elif isinstance(value, str):
        return "\"" + value.replace("\\", "\\\\").replace("\"", "\\\"") + "\""
    elif isinstance(value, tuple):
        if len(value) == 1:
            return "(" + encode_value(value[0]) + ", )"
        return "(" + ", ".join(encode_value(v) for v in value) + ")"
    elif isinstance(value, list):
        return "[" + ", ".join(encode_value(v) for v in value) + "]"
    else:
        return repr(value)


class RunConfig:
    """All settings of one command; attributes are named as in
    :data:`FIELDS`."""
    def __init__(self):
        for name, _, default, _ in FIELDS:
            setattr(self, name, default)

    @classmethod
    def build(cls, values):
        """Defaults, then the preset named in ``values``, then ``values``."""
        cfg = cls()
        for key in values:
            if key not in _field_types:
                raise ConfigError(key, "unknown configuration key")
        preset = values.get("preset")
        variant = values.get("variant", cfg.variant)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError("preset", "unknown preset {!r}, expected "
                                  "one of {}".format(preset, sorted(PRESETS)))
            p = PRESETS[preset]
            cfg.preset = preset
            cfg.train_counts = list(p["train_counts"])
            hyper = p["sscas" if variant == "sscas" else "default"]
            for key, value in hyper.items():
                setattr(cfg, key, value)
        for key, value in values.items():
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError("variant", "unknown variant {!r}, expected one "
                              "of {}".format(self.variant, ", ".join(VARIANTS)))
        for key in ("l", "hidden1", "hidden2", "batch", "patch",
                    "synth_classes", "synth_bands", "synth_height",
                    "synth_width", "synth_redundancy"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be positive")
        for key in ("epochs", "stage_a", "stage_b", "stage_c", "seed",
                    "synth_seed", "train_per_class"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        if self.lr < 0:
            raise ConfigError("lr", "must be non-negative")
        if self.normalize not in ("full", "train", "none"):
            raise ConfigError("normalize", "expected full, train or none")
        if self.synth_kind not in ("spectral", "spatial"):
            raise ConfigError("synth_kind", "expected spectral or spatial")
        if (self.cube is None) != (self.labels is None):
            raise ConfigError("labels" if self.cube is not None else "cube",
                              "cube and labels must be given together")
        if self.variant != "cas-o" and not self.learn_output_weights:
            raise ConfigError("learn_output_weights", "only applies to "
                              "variant cas-o, not {}".format(self.variant))
        if self.variant == "sscas":
            if self.patch % 2 == 0:
                raise ConfigError("patch", "must be odd")
        else:
            defaults = RunConfig()
            for key in _SSCAS_ONLY:
                if getattr(self, key) != getattr(defaults, key):
                    raise ConfigError(key, "only applies to variant sscas, "
                                      "not {}".format(self.variant))

    def values(self):
        return {name: getattr(self, name) for name, _, _, _ in FIELDS}

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values() == other.values()

    def __repr__(self):
        return "RunConfig({})".format(", ".join(
            "{}={!r}".format(k, v) for k, v in self.values().items()))


def parse(text, overrides=None):
    """Builds a :class:`RunConfig` from file text and raw flag overrides.

    ``overrides`` maps keys to unparsed strings; they win over the file.
    """
    values = dict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(key, "line {}: expected 'key = value'"
                              .format(lineno))
        if key in values:
            raise ConfigError(key, "line {}: duplicate key".format(lineno))
        values[key] = decode_value(key, raw)
    for key, raw in (overrides or dict()).items():
        values[key] = decode_value(key, raw)
    return RunConfig.build(values)


def load_file(filename, overrides=None):
    with open(filename, "r", encoding="utf-8") as f:
        return parse(f.read(), overrides)


def serialize(cfg):
    """Text of the keys whose values differ from defaults and preset."""
    baseline = RunConfig.build({"variant": cfg.variant,
                                "preset": cfg.preset})
    lines = ["variant = " + encode_value(cfg.variant)]
    if cfg.preset is not None:
        lines.append("preset = " + encode_value(cfg.preset))
    for name, _, _, _ in FIELDS:
        if name in ("variant", "preset"):
            continue
        value = getattr(cfg, name)
        if value != getattr(baseline, name):
            lines.append("{} = {}".format(name, encode_value(value)))
    return "\n".join(lines) + "\n"
