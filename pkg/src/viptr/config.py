"""Run configuration documents (JSON) for the ``train`` subcommand.

Top-level keys and defaults:

=================  ===========================================================
variant            registry name to start from (default none: give the four
                   architecture keys below explicitly)
channels           four stage widths (default from ``variant``)
depths             four stage depths (default from ``variant``)
heads              four head counts (default from ``variant``)
permutation        permutation string (default from ``variant``)
pe_kind            none / ape / cpe / lepe (default ``lepe``)
ffn_ratio          FFN hidden ratio (default from ``variant``, else 4.0)
alphabet_path      symbol file, one per line (default the digits 0-9)
seed               integer seed (default 0; ``VIPTR_SEED`` overrides)
input_height       image height (default 32)
optimizer          block: lr_base 1e-3, weight_decay 0.05, betas [0.9, 0.999],
                   eps 1e-8, warmup_epochs 1, total_epochs 30, clip_norm 5.0
data               block: n_train 5000, n_eval 500, width 96, min_len 1,
                   max_len 5, noise 0.1, glyph_seed 1234
train              block: batch_size 32, shuffle true, stop_at_acc null,
                   max_epochs null, log_path "metrics.csv",
                   ckpt_dir "checkpoint"
=================  ===========================================================

Unknown keys at any level are rejected.
"""
import json
import os
from dataclasses import dataclass, field, fields

from .backbone import REGISTRY, VariantConfig
from .ctc import Alphabet
from .optim import OptimHyper
from .synth import SynthSpec
from .train import TrainOptions

ARCH_KEYS = ("channels", "depths", "heads", "permutation", "ffn_ratio")
TOP_KEYS = {"variant", *ARCH_KEYS, "pe_kind", "alphabet_path", "seed", "input_height",
            "optimizer", "data", "train"}
OPTIMIZER_KEYS = {f.name for f in fields(OptimHyper)}
DATA_KEYS = {"n_train", "n_eval", "width", "min_len", "max_len", "noise", "glyph_seed"}
TRAIN_KEYS = {"batch_size", "shuffle", "stop_at_acc", "max_epochs", "log_path", "ckpt_dir"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: VariantConfig
    alphabet: Alphabet
    hyper: OptimHyper
    synth: SynthSpec
    options: TrainOptions
    seed: int = 0
    raw: dict = field(default_factory=dict)


def _check_keys(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def parse_run_config(doc, base_dir=".", env=None):
    """Validate a decoded JSON document and resolve it into a :class:`RunConfig`."""
    env = os.environ if env is None else env
    _check_keys(doc, TOP_KEYS, "config")
    arch = {}
    if "variant" in doc:
        if doc["variant"] not in REGISTRY:
            raise ConfigError(f"unknown variant {doc['variant']!r}")
        arch.update(REGISTRY[doc["variant"]])
    for k in ARCH_KEYS:
        if k in doc:
            arch[k] = doc[k]
    missing = [k for k in ("channels", "depths", "heads", "permutation") if k not in arch]
    if missing:
        raise ConfigError(f"missing {missing[0]!r} (give it or a 'variant')")

    if "alphabet_path" in doc:
        path = os.path.join(base_dir, doc["alphabet_path"])
        alphabet = Alphabet.from_file(path)
    else:
        alphabet = Alphabet.from_string("0123456789")

    seed = doc.get("seed", 0)
    if env.get("VIPTR_SEED"):
        try:
            seed = int(env["VIPTR_SEED"])
        except ValueError:
            raise ConfigError(f"VIPTR_SEED must be an integer, got {env['VIPTR_SEED']!r}") from None
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    data = doc.get("data", {})
    _check_keys(data, DATA_KEYS, "data")
    opt_block = doc.get("optimizer", {})
    _check_keys(opt_block, OPTIMIZER_KEYS, "optimizer")
    train_block = doc.get("train", {})
    _check_keys(train_block, TRAIN_KEYS, "train")

    try:
        model = VariantConfig(name=doc.get("variant", "custom"), pe_kind=doc.get("pe_kind", "lepe"),
                              input_height=doc.get("input_height", 32), num_classes=alphabet.size,
                              ape_width=data.get("width", 96), **arch)
        hyper = OptimHyper(**opt_block)
        synth = SynthSpec(alphabet=alphabet, height=model.input_height, width=data.get("width", 96),
                          min_len=data.get("min_len", 1), max_len=data.get("max_len", 5),
                          noise=data.get("noise", 0.1), glyph_seed=data.get("glyph_seed", 1234))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None

    def resolve(p):
        return None if p is None else os.path.join(base_dir, p)

    options = TrainOptions(batch_size=train_block.get("batch_size", 32),
                           n_train=data.get("n_train", 5000), n_eval=data.get("n_eval", 500),
                           shuffle=train_block.get("shuffle", True),
                           stop_at_acc=train_block.get("stop_at_acc"),
                           max_epochs=train_block.get("max_epochs"),
                           log_path=resolve(train_block.get("log_path", "metrics.csv")),
                           ckpt_dir=resolve(train_block.get("ckpt_dir", "checkpoint")))
    return RunConfig(model, alphabet, hyper, synth, options, seed, doc)


def load_run_config(path, env=None):
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return parse_run_config(doc, os.path.dirname(os.path.abspath(path)), env)
