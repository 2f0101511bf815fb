"""Run configuration: a line-oriented ``key = value`` format.

Keys use dotted sections (``model.arch = adacnn``).  Unknown keys are hard
errors so typos cannot silently fall back to defaults; every key has a
documented default.  ``-1`` (or 0 where noted) marks values resolved
automatically from the architecture or data source.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{s}'")


def _ints(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(part) for part in s.split(","))


def _floats(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(float(part) for part in s.split(","))


def _choice(*options):
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {options}, got '{s}'")
        return v

    return parse


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    help: str


KEYS: dict[str, Key] = {
    # -- task source ---------------------------------------------------
    "source.kind": Key("gaussian", _choice("gaussian", "omniglot", "cloze"),
                       "task distribution backing the episodes"),
    "source.seed": Key(0, int, "seed fixing prototypes/templates of synthetic sources"),
    "source.classes": Key(50, int, "gaussian: total number of classes"),
    "source.dim": Key(16, int, "gaussian: input dimensionality"),
    "source.noise": Key(0.1, float, "gaussian: within-class noise scale"),
    "source.train_classes": Key(-1, int, "classes in the train split; -1 = auto "
                                         "(gaussian 30, omniglot 30, cloze 3/5 of the pool)"),
    "source.val_classes": Key(-1, int, "classes in the validation split; -1 = auto "
                                       "(gaussian 10, omniglot 0, cloze 1/5 of the pool); 0 skips validation"),
    "source.test_classes": Key(-1, int, "classes in the test split; -1 = auto "
                                        "(gaussian 10, omniglot 10, cloze 1/5 of the pool)"),
    "source.dir": Key("", str, "omniglot: dataset directory containing manifest.csv"),
    "source.image_size": Key(14, int, "omniglot: images resized to this square size"),
    "source.rotations": Key(True, _bool, "omniglot: add 90/180/270-degree rotated train classes"),
    "source.vocab": Key(60, int, "cloze: vocabulary size (excluding pad/blank markers)"),
    "source.sentence_len": Key(8, int, "cloze: fixed sentence length"),
    "source.pool": Key(30, int, "cloze: number of target words (split across train/val/test)"),
    "source.template_noise": Key(0.2, float, "cloze: per-position corruption probability"),
    # -- episode shape -------------------------------------------------
    "episode.way": Key(5, int, "classes per episode (C)"),
    "episode.shots": Key(1, int, "labeled description examples per class (k)"),
    "episode.queries_per_class": Key(-1, int,
                                     "queries per class; -1 = auto (15 for vision sources, 1 for cloze)"),
    # -- model ---------------------------------------------------------
    "model.arch": Key("adaffn", _choice("adaffn", "adacnn", "adaresnet", "adalstm", "lstm_adaffn"),
                      "base-learner architecture"),
    "model.classes": Key(0, int, "output classes; 0 = episode.way"),
    "model.hidden": Key((64, 64), _ints, "dense widths (adaffn hidden / hybrid head / resnet fc)"),
    "model.activation": Key("tanh", _choice("tanh", "relu"), "hidden activation for dense layers"),
    "model.filters": Key(32, int, "adacnn: filters per conv layer"),
    "model.conv_layers": Key(5, int, "adacnn: number of conv layers"),
    "model.csn_layers": Key(4, int, "adacnn: how many trailing layers carry shifts"),
    "model.block_filters": Key((64, 96, 128, 256), _ints, "adaresnet: per-block filters before division"),
    "model.filter_divisor": Key(4, int, "adaresnet: divide block filters by this for desk runs"),
    "model.csn_blocks": Key(2, int, "adaresnet: how many trailing blocks carry shifts"),
    "model.lstm_hidden": Key((64,), _ints, "adalstm stack sizes / hybrid encoder size"),
    "model.embed_dim": Key(32, int, "token embedding size for sequence models"),
    "model.dropout": Key((), _floats, "per-layer input dropout rates (training only; empty = none)"),
    "model.shifts_enabled": Key(True, _bool, "false trains the shift-disabled control"),
    "model.resblock_shift_granularity": Key("channel", _choice("channel", "unit"),
                                            "conv shift granularity: per filter or per spatial unit"),
    # derived input metadata; 0/empty = filled in from the source at build
    "model.input_kind": Key("", str, "vector|image|tokens (auto)"),
    "model.input_dim": Key(0, int, "vector input width (auto)"),
    "model.image_size": Key(0, int, "image side length (auto)"),
    "model.channels": Key(1, int, "image channels"),
    "model.vocab": Key(0, int, "token id count including pad/blank (auto)"),
    "model.seq_len": Key(0, int, "fixed sequence length (auto)"),
    # -- conditioning ---------------------------------------------------
    "cond.mode": Key("grad", _choice("grad", "df"), "conditioning information: error gradients or direct feedback"),
    "cond.preprocess_p": Key(7.0, float, "gradient preprocessing constant"),
    "cond.stop_grad": Key(True, _bool,
                          "treat extracted conditioning as constant (only 'true' is supported; "
                          "flowing meta-gradients through it would need second-order derivatives)"),
    # -- memory ----------------------------------------------------------
    "memory.attention": Key("soft", _choice("soft", "hard"), "shift retrieval: softmax or argmax over cosine"),
    "memory.key_dim": Key(64, int, "key vector dimensionality"),
    "memory.key_hidden": Key((64,), _ints, "hidden widths of the key MLP / size of the key LSTM"),
    "memory.value_hidden": Key(20, int, "value MLP hidden width (20 or 40)"),
    # -- ablations --------------------------------------------------------
    "ablation.shift_mode": Key("normalized", _choice("normalized", "raw_additive", "pre_activation"),
                               "how shifts enter hidden layers"),
    "ablation.value_fn": Key("mlp3", _choice("mlp3", "scalar_lambda", "perceptron1"),
                             "value function variant"),
    # -- training ----------------------------------------------------------
    "train.optimizer": Key("adam", _choice("adam", "sgdm"), "meta-optimizer"),
    "train.lr": Key(0.001, float, "learning rate"),
    "train.momentum": Key(0.9, float, "sgdm momentum"),
    "train.clip": Key(-1.0, float, "gradient clip threshold; -1 = auto (10 for adacnn, none otherwise), 0 = none"),
    "train.clip_kind": Key("norm", _choice("norm", "value"), "clip by global norm or elementwise value"),
    "train.episodes": Key(2000, int, "training episode budget"),
    "train.val_interval": Key(400, int, "episodes between validation runs"),
    "train.val_episodes": Key(400, int, "episodes per validation run"),
    "train.seed": Key(0, int, "run seed (CSN_SEED env and --seed override)"),
    # -- evaluation ----------------------------------------------------------
    "eval.episodes": Key(400, int, "test episodes for eval reports"),
}


def parse_text(text: str) -> dict:
    """Parse config lines into an override dict; unknown keys are errors."""
    overrides: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        spec = KEYS.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key '{key}' (line {lineno})")
        try:
            overrides[key] = spec.parse(value.strip())
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for '{key}' (line {lineno}): {e}")
    return overrides


def parse_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read())


def resolve(overrides: dict | None = None) -> dict:
    """Full config: documented defaults overlaid with ``overrides``."""
    cfg = {name: key.default for name, key in KEYS.items()}
    if overrides:
        for k, v in overrides.items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key '{k}'")
            cfg[k] = v
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def to_text(cfg: dict) -> str:
    lines = [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def finalize(cfg: dict, source_meta: dict | None = None) -> dict:
    """Resolve the auto-valued keys against the architecture and source."""
    out = dict(cfg)
    if out["model.classes"] == 0:
        out["model.classes"] = out["episode.way"]
    if out["episode.queries_per_class"] < 0:
        out["episode.queries_per_class"] = 1 if out["source.kind"] == "cloze" else 15
    if out["train.clip"] < 0:
        out["train.clip"] = 10.0 if out["model.arch"] == "adacnn" else 0.0
    if source_meta:
        out["model.input_kind"] = source_meta["input_kind"]
        if source_meta["input_kind"] == "vector":
            out["model.input_dim"] = source_meta["input_dim"]
        elif source_meta["input_kind"] == "image":
            out["model.image_size"] = source_meta["image_size"]
            out["model.channels"] = source_meta.get("channels", 1)
        elif source_meta["input_kind"] == "tokens":
            out["model.vocab"] = source_meta["vocab"]
            out["model.seq_len"] = source_meta["seq_len"]
    return out
