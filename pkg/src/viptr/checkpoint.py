"""Checkpoint directories: a text manifest plus one little-endian float32 blob.

Layout::

    <dir>/manifest.txt   header line, a ``config`` JSON line, then one line per tensor
    <dir>/weights.bin    tensors concatenated in manifest order

Tensor lines are tab separated: ``name dtype shape offset length kind crc32``
where ``shape`` is comma separated, ``offset``/``length`` are byte counts,
``kind`` is ``param`` or ``buffer`` and ``crc32`` is eight hex digits of the
tensor bytes. Lines are sorted by name.
"""
import json
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .backbone import SVIPTR, VariantConfig, build_model
from .ctc import Alphabet

MAGIC = "viptr-checkpoint 1"
MANIFEST = "manifest.txt"
BLOB = "weights.bin"
_LE_F32 = np.dtype("<f4")


class CorruptCheckpoint(ValueError):
    pass


@dataclass
class Entry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    length: int
    kind: str
    crc32: int

    def line(self):
        shape = ",".join(str(d) for d in self.shape)
        return "\t".join([self.name, self.dtype, shape, str(self.offset), str(self.length), self.kind,
                          f"{self.crc32:08x}"])

    @classmethod
    def parse(cls, line, lineno):
        parts = line.split("\t")
        if len(parts) != 7:
            raise CorruptCheckpoint(f"manifest line {lineno}: expected 7 fields, got {len(parts)}")
        name, dtype, shape, off, length, kind, crc = parts
        try:
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            return cls(name, dtype, dims, int(off), int(length), kind, int(crc, 16))
        except ValueError:
            raise CorruptCheckpoint(f"manifest line {lineno}: malformed entry for {name!r}") from None


@dataclass
class LoadedCheckpoint:
    model: SVIPTR
    config: VariantConfig
    alphabet: Alphabet
    extra: dict


def save_checkpoint(model, path, alphabet=None, extra=None):
    """Write ``model`` (parameters and buffers) to the directory ``path``."""
    os.makedirs(path, exist_ok=True)
    kinds = {n: "param" for n, _ in model.named_parameters()}
    kinds.update({n: "buffer" for n, _ in model.named_buffers()})
    sd = model.state_dict()
    entries, chunks, offset = [], [], 0
    for name in sorted(sd):
        raw = np.ascontiguousarray(sd[name], dtype=_LE_F32).tobytes()
        entries.append(Entry(name, "f32", tuple(np.shape(sd[name])), offset, len(raw), kinds[name],
                             zlib.crc32(raw)))
        chunks.append(raw)
        offset += len(raw)
    config = {"variant": model.cfg.to_dict(),
              "alphabet": list(alphabet.symbols) if alphabet is not None else None,
              "extra": extra or {}}
    tmp_blob = os.path.join(path, BLOB + ".tmp")
    with open(tmp_blob, "wb") as f:
        for c in chunks:
            f.write(c)
    tmp_man = os.path.join(path, MANIFEST + ".tmp")
    with open(tmp_man, "w", encoding="utf-8", newline="\n") as f:
        f.write(MAGIC + "\n")
        f.write("config\t" + json.dumps(config, sort_keys=True, ensure_ascii=False) + "\n")
        for e in entries:
            f.write(e.line() + "\n")
    os.replace(tmp_blob, os.path.join(path, BLOB))
    os.replace(tmp_man, os.path.join(path, MANIFEST))
    return entries


def read_manifest(path):
    """Parse ``manifest.txt``: returns ``(config_dict, [Entry, ...])``."""
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if not lines or lines[0] != MAGIC:
        raise CorruptCheckpoint("manifest header missing or unsupported")
    if len(lines) < 2 or not lines[1].startswith("config\t"):
        raise CorruptCheckpoint("manifest has no config line")
    try:
        config = json.loads(lines[1][len("config\t"):])
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"config line is not valid JSON: {e}") from None
    entries = [Entry.parse(ln, i + 3) for i, ln in enumerate(lines[2:]) if ln]
    expected = 0
    for e in entries:
        if e.dtype != "f32":
            raise CorruptCheckpoint(f"{e.name}: unsupported dtype {e.dtype}")
        if e.offset != expected or e.length != 4 * int(np.prod(e.shape, dtype=np.int64)):
            raise CorruptCheckpoint(f"{e.name}: offset/length do not match the layout")
        expected += e.length
    names = [e.name for e in entries]
    if names != sorted(names) or len(set(names)) != len(names):
        raise CorruptCheckpoint("manifest entries are not sorted unique names")
    return config, entries


def load_checkpoint(path):
    """Rebuild the model stored at ``path``, validating layout, sizes and checksums."""
    config, entries = read_manifest(path)
    cfg = VariantConfig.from_dict(config["variant"])
    model = build_model(cfg, init=False)
    expected = dict(model.state_dict())
    on_disk = {e.name for e in entries}
    missing = sorted(set(expected) - on_disk)
    if missing:
        raise CorruptCheckpoint(f"checkpoint lacks tensor {missing[0]}")
    unknown = sorted(on_disk - set(expected))
    if unknown:
        raise CorruptCheckpoint(f"checkpoint has unexpected tensor {unknown[0]}")
    with open(os.path.join(path, BLOB), "rb") as f:
        blob = f.read()
    sd = {}
    for e in entries:
        if tuple(expected[e.name].shape) != e.shape:
            raise CorruptCheckpoint(f"{e.name}: shape {e.shape} does not match config "
                                    f"{tuple(expected[e.name].shape)}")
        raw = blob[e.offset:e.offset + e.length]
        if len(raw) != e.length:
            raise CorruptCheckpoint(f"{e.name}: blob truncated ({len(raw)} of {e.length} bytes)")
        if zlib.crc32(raw) != e.crc32:
            raise CorruptCheckpoint(f"{e.name}: checksum mismatch")
        sd[e.name] = np.frombuffer(raw, dtype=_LE_F32).reshape(e.shape).astype(np.float32)
    if entries and len(blob) != entries[-1].offset + entries[-1].length:
        raise CorruptCheckpoint(f"blob has {len(blob)} bytes, manifest describes "
                                f"{entries[-1].offset + entries[-1].length}")
    model.load_state_dict(sd)
    model.eval()
    symbols = config.get("alphabet")
    alphabet = Alphabet(tuple(symbols)) if symbols else Alphabet.english()
    return LoadedCheckpoint(model, cfg, alphabet, config.get("extra", {}))
