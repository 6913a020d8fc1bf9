"""On-disk formats: model manifest + weight blob, frame sequences, CSV, threshold files.

Model: a JSON manifest (``format: changeinfer-model``) listing the layers and,
for each parameter, its byte offset and shape inside one raw little-endian
float32 blob stored next to the manifest.

Frames: a directory with ``sequence.json`` listing the frame files in order.
Raw frames are little-endian float32, planar (channel-major, row-major), each
with a ``<name>.json`` sidecar ``{"channels", "height", "width"}``. 8-bit
PGM/PPM frames are accepted and divided by 255.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import BATCHNORM, CONV, LayerSpec, NetworkSpec

MODEL_FORMAT = "changeinfer-model"
FRAMES_FORMAT = "changeinfer-frames"
VERSION = 1
LE_F32 = np.dtype("<f4")
PARAM_NAMES = {CONV: ("weight", "bias"), BATCHNORM: ("gamma", "beta", "mean", "var", "eps")}


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to a temp file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "w" if isinstance(data, str) else "wb"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({"newline": ""} if mode == "w" else {})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(path, offset, exc.msg) from None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


@dataclass
class Model:
    spec: NetworkSpec
    params: dict
    thresholds: dict[str, float] = field(default_factory=dict)
    policies: dict[str, str] = field(default_factory=dict)


def write_model(path, spec: NetworkSpec, params, thresholds=None, policies=None) -> None:
    """Write ``<path>`` (manifest) and ``<path stem>.bin`` (weights)."""
    path = Path(path)
    blob_name = path.with_suffix(".bin").name
    thresholds = thresholds or {}
    policies = policies or {}
    chunks, offset = [], 0
    layers = []
    for layer in spec.layers:
        entry = {"name": layer.name, "kind": layer.kind}
        if layer.inputs:
            entry["inputs"] = list(layer.inputs)
        if layer.kind == CONV:
            entry.update(out_channels=layer.out_channels, kernel=list(layer.kernel), stride=layer.stride,
                         padding=layer.padding, relu=layer.relu)
        elif layer.kind == "maxpool":
            entry.update(size=layer.kernel[0], stride=layer.stride, ceil_mode=layer.ceil_mode)
        if layer.out_hw is not None:
            entry["out_hw"] = list(layer.out_hw)
        if layer.name in thresholds:
            entry["threshold"] = float(thresholds[layer.name])
        if layer.name in policies:
            entry["policy"] = policies[layer.name]
        if layer.kind in PARAM_NAMES:
            entry["params"] = {}
            for pname in PARAM_NAMES[layer.kind]:
                arr = np.ascontiguousarray(params[layer.name][pname], dtype=LE_F32)
                raw = arr.tobytes()
                entry["params"][pname] = {"offset": offset, "shape": list(arr.shape)}
                chunks.append(raw)
                offset += len(raw)
        layers.append(entry)
    c, h, w = spec.input_shape
    manifest = {"format": MODEL_FORMAT, "version": VERSION, "name": spec.name, "blob": blob_name,
                "input": {"channels": c, "height": h, "width": w}, "layers": layers}
    atomic_write(path.with_suffix(".bin"), b"".join(chunks))
    atomic_write(path, _dumps(manifest))


def read_model(path) -> Model:
    path = Path(path)
    doc = _load_json(path)

    def bad(msg):
        return FormatError(path, None, msg)

    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise bad(f"not a {MODEL_FORMAT} manifest")
    if doc.get("version") != VERSION:
        raise bad(f"unsupported manifest version {doc.get('version')!r}")
    try:
        inp = doc["input"]
        input_shape = (int(inp["channels"]), int(inp["height"]), int(inp["width"]))
        blob_path = path.parent / doc["blob"]
        entries = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise bad(f"missing or invalid field: {exc}") from None
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(blob_path, None, "weight blob not found") from None

    layers, params, thresholds, policies = [], {}, {}, {}
    spans = []
    for n, e in enumerate(entries):
        try:
            kind = e["kind"]
            kw = dict(name=e["name"], kind=kind, inputs=tuple(e.get("inputs", ())),
                      out_hw=tuple(e["out_hw"]) if e.get("out_hw") else None)
            if kind == CONV:
                kw.update(out_channels=int(e["out_channels"]), kernel=tuple(e["kernel"]),
                          stride=int(e.get("stride", 1)), padding=int(e.get("padding", 0)),
                          relu=bool(e.get("relu", False)))
            elif kind == "maxpool":
                kw.update(kernel=int(e.get("size", 2)), stride=int(e.get("stride", 2)),
                          ceil_mode=bool(e.get("ceil_mode", False)))
            layers.append(LayerSpec(**kw))
        except (KeyError, TypeError, ValueError) as exc:
            raise bad(f"layer {n}: missing or invalid field: {exc}") from None
        if "threshold" in e:
            thresholds[e["name"]] = float(e["threshold"])
        if "policy" in e:
            policies[e["name"]] = str(e["policy"])
        if kind in PARAM_NAMES:
            params[e["name"]] = {}
            for pname in PARAM_NAMES[kind]:
                try:
                    ref = e["params"][pname]
                    off, shape = int(ref["offset"]), tuple(int(v) for v in ref["shape"])
                except (KeyError, TypeError, ValueError):
                    raise bad(f"layer {n} ({e['name']}): parameter {pname!r} missing") from None
                nbytes = int(np.prod(shape)) * 4
                if off < 0 or off % 4 or off + nbytes > len(blob):
                    raise FormatError(blob_path, off, f"{e['name']}.{pname}: {nbytes} bytes do not fit "
                                      f"in a {len(blob)}-byte blob")
                spans.append((off, off + nbytes, f"{e['name']}.{pname}"))
                params[e["name"]][pname] = np.frombuffer(blob, LE_F32, int(np.prod(shape)), off) \
                    .astype(np.float32).reshape(shape)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(blob_path, b0, f"{bn} overlaps {an}")
    spec = NetworkSpec(input_shape, tuple(layers), name=doc.get("name", "network"))
    return Model(spec, params, thresholds, policies)


def write_frames(directory, frames, prefix: str = "frame") -> list[str]:
    """Write raw float32 frames plus sidecars and the ordering manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for t, frame in enumerate(frames):
        frame = np.ascontiguousarray(frame, dtype=LE_F32)
        name = f"{prefix}_{t:05d}.f32"
        c, h, w = frame.shape
        atomic_write(directory / name, frame.tobytes())
        atomic_write(directory / (name + ".json"), _dumps({"channels": c, "height": h, "width": w}))
        names.append(name)
    atomic_write(directory / "sequence.json", _dumps({"format": FRAMES_FORMAT, "version": VERSION,
                                                      "frames": names}))
    return names


def read_frame(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        return _read_netpbm(path)
    header = _load_json(path.with_name(path.name + ".json"))
    try:
        shape = (int(header["channels"]), int(header["height"]), int(header["width"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path.with_name(path.name + ".json"), None, f"bad header: {exc}") from None
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(path, None, "frame file not found") from None
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FormatError(path, min(len(raw), expected), f"expected {expected} bytes for shape {shape}, "
                          f"found {len(raw)}")
    return np.frombuffer(raw, LE_F32).astype(np.float32).reshape(shape)


def _read_netpbm(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                raise FormatError(path, 0, f"only 8-bit PGM/PPM supported, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError:
        raise FormatError(path, 0, "not a PGM/PPM image") from None
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr.astype(np.float32) / np.float32(255))


def read_frames(directory) -> list[np.ndarray]:
    """Load a frame sequence; every frame must have the same shape."""
    directory = Path(directory)
    manifest = directory / "sequence.json"
    if manifest.exists():
        doc = _load_json(manifest)
        if not isinstance(doc, dict) or doc.get("format") != FRAMES_FORMAT or doc.get("version") != VERSION:
            raise FormatError(manifest, None, "not a supported frame sequence manifest")
        names = doc.get("frames")
        if not isinstance(names, list) or len(set(names)) != len(names):
            raise FormatError(manifest, None, "frame list missing or has duplicates")
    elif directory.is_dir():
        names = sorted(p.name for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    else:
        raise FormatError(directory, None, "frame directory not found")
    if not names:
        raise FormatError(manifest if manifest.exists() else directory, None, "no frames")
    frames = [read_frame(directory / n) for n in names]
    for n, f in zip(names, frames):
        if f.shape != frames[0].shape:
            raise FormatError(directory / n, None, f"shape {f.shape} differs from first frame {frames[0].shape}")
    return frames


def format_float(v) -> str:
    return "" if v is None else repr(float(v))


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_thresholds(path, names, taus) -> None:
    atomic_write(path, "".join(f"{n} {float(t)!r}\n" for n, t in zip(names, taus)))


def parse_thresholds(text: str, source="<thresholds>"):
    """Parse ``"0.1,0.2"``, one value per line, or ``name value`` lines.

    Returns a list (positional) or a dict (named).
    """
    named, values = {}, []
    pos = 0
    for ln in text.replace(",", "\n").splitlines(keepends=True):
        body = ln.split("#", 1)[0].strip()
        if body:
            parts = body.split()
            try:
                if len(parts) == 2:
                    named[parts[0]] = float(parts[1])
                elif len(parts) == 1:
                    values.append(float(parts[0]))
                else:
                    raise ValueError(body)
            except ValueError:
                raise FormatError(source, pos, f"cannot parse threshold entry {body!r}") from None
        pos += len(ln.encode("utf-8"))
    if named and values:
        raise FormatError(source, None, "mix of named and positional thresholds")
    return named if named else values
