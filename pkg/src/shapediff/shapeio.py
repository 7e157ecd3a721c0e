"""Shape files (OBJ, ASCII PLY, XYZ), trajectory directories and run configs."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ddk import DiffusionSchedule, Mode, Trajectory
from .ddm import TrainConfig
from .network import Hyperparams
from .regularizers import EnergyReport, RegularizerWeights
from .shape import Shape, ShapeError

SHAPE_DIGITS = 9
FRAME_DIGITS = 17
MANIFEST = "manifest.json"
MANIFEST_SCHEMA = 1
FORMATS = (".obj", ".ply", ".xyz")


class FormatError(ShapeError):
    """Malformed shape file; ``line`` is 1-based when known."""

    def __init__(self, path, message: str, line: int | None = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class TrajectoryIOError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# shape files
# --------------------------------------------------------------------------

def _fmt(x: float, digits: int) -> str:
    return f"{x:.{digits}g}"


def _row(values, digits: int) -> str:
    return " ".join(_fmt(float(v), digits) for v in values)


def _floats(parts, path, line, count=3):
    if len(parts) < count:
        raise FormatError(path, f"expected {count} numbers, got {len(parts)}", line)
    try:
        return [float(p) for p in parts[:count]]
    except ValueError:
        raise FormatError(path, f"bad number in {' '.join(parts)!r}", line) from None


def _obj_index(token: str, n: int, path, line) -> int:
    try:
        k = int(token.split("/")[0])
    except ValueError:
        raise FormatError(path, f"bad index {token!r}", line) from None
    idx = k - 1 if k > 0 else n + k
    if k == 0 or idx < 0 or idx >= n:
        raise FormatError(path, f"index {k} out of range for {n} vertices", line)
    return idx


def _read_obj(path: Path) -> Shape:
    verts, normals, faces, edges = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            tag, rest = parts[0], parts[1:]
            if tag == "v":
                verts.append(_floats(rest, path, lineno))
            elif tag == "vn":
                normals.append(_floats(rest, path, lineno))
            elif tag == "f":
                if len(rest) < 3:
                    raise FormatError(path, "face with fewer than 3 vertices", lineno)
                idx = [_obj_index(tok, len(verts), path, lineno) for tok in rest]
                for j in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
            elif tag == "l":
                if len(rest) < 2:
                    raise FormatError(path, "line record with fewer than 2 vertices", lineno)
                idx = [_obj_index(tok, len(verts), path, lineno) for tok in rest]
                edges.extend(zip(idx[:-1], idx[1:]))
            elif tag in ("vt", "o", "g", "s", "usemtl", "mtllib", "vp"):
                continue
            else:
                raise FormatError(path, f"unknown record {tag!r}", lineno)
    if faces and edges:
        raise FormatError(path, "file mixes face and line records")
    nrm = None
    if normals:
        if len(normals) != len(verts):
            raise FormatError(path, f"{len(normals)} normals for {len(verts)} vertices")
        nrm = np.array(normals, dtype=np.float64)
        length = np.linalg.norm(nrm, axis=1)
        if np.any(length == 0):
            raise FormatError(path, f"zero-length normal at vertex {int(np.argmin(length))}")
        nrm = nrm / length[:, None]
    return Shape(np.array(verts, dtype=np.float64).reshape(-1, 3),
                 np.array(faces, dtype=np.int64) if faces else None,
                 np.array(edges, dtype=np.int64) if edges else None, nrm)


def _write_obj(shape: Shape, fh, digits: int):
    for v in shape.vertices:
        fh.write(f"v {_row(v, digits)}\n")
    if shape.normals is not None:
        for v in shape.normals:
            fh.write(f"vn {_row(v, digits)}\n")
    if shape.faces is not None:
        for a, b, c in shape.faces + 1:
            fh.write(f"f {a} {b} {c}\n")
    elif shape.edges is not None:
        for a, b in shape.edges + 1:
            fh.write(f"l {a} {b}\n")


_PLY_SIZES = {"char", "uchar", "short", "ushort", "int", "uint", "float", "double",
              "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64"}


def _read_ply(path: Path) -> Shape:
    with open(path, encoding="ascii", errors="strict") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(path, "missing 'ply' magic", 1)
    elements = []  # (name, count, [props]) where a prop is (name, is_list)
    lineno = 1
    body = None
    for lineno in range(2, len(lines) + 1):
        parts = lines[lineno - 1].split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise FormatError(path, "only ASCII PLY is supported", lineno)
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(path, "bad element record", lineno)
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError(path, "property before element", lineno)
            if len(parts) == 5 and parts[1] == "list":
                elements[-1][2].append((parts[4], True))
            elif len(parts) == 3 and parts[1] in _PLY_SIZES:
                elements[-1][2].append((parts[2], False))
            else:
                raise FormatError(path, "bad property record", lineno)
        elif parts[0] == "end_header":
            body = lineno
            break
        else:
            raise FormatError(path, f"unknown header record {parts[0]!r}", lineno)
    if body is None:
        raise FormatError(path, "missing end_header")
    verts, faces = None, []
    cur = body
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            cur += 1
            if cur > len(lines):
                raise FormatError(path, f"file ends inside element {name!r}", cur)
            parts = lines[cur - 1].split()
            rows.append((cur, parts))
        if name == "vertex":
            names = [p for p, _ in props]
            if any(p[1] for p in props) or not {"x", "y", "z"} <= set(names):
                raise FormatError(path, "vertex element needs scalar x, y, z", body)
            cols = [names.index(c) for c in "xyz"]
            verts = np.empty((count, 3))
            for k, (ln, parts) in enumerate(rows):
                if len(parts) != len(props):
                    raise FormatError(path, f"expected {len(props)} values, got {len(parts)}", ln)
                verts[k] = _floats([parts[c] for c in cols], path, ln)
        elif name == "face":
            if verts is None:
                raise FormatError(path, "face element before vertex element", body)
            if len(props) != 1 or not props[0][1]:
                raise FormatError(path, "face element needs a single list property", body)
            for ln, parts in rows:
                try:
                    vals = [int(p) for p in parts]
                except ValueError:
                    raise FormatError(path, "bad face index", ln) from None
                if not vals or vals[0] != len(vals) - 1 or vals[0] < 3:
                    raise FormatError(path, "face list length mismatch", ln)
                idx = vals[1:]
                for k in idx:
                    if k < 0 or k >= len(verts):
                        raise FormatError(path, f"index {k} out of range for {len(verts)} vertices", ln)
                for j in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
    if verts is None:
        raise FormatError(path, "no vertex element")
    if cur < len(lines) and any(s.strip() for s in lines[cur:]):
        raise FormatError(path, "trailing data after the last element", cur + 1)
    return Shape(verts, np.array(faces, dtype=np.int64) if faces else None)


def _write_ply(shape: Shape, fh, digits: int):
    fh.write("ply\nformat ascii 1.0\n")
    fh.write(f"element vertex {shape.n}\nproperty double x\nproperty double y\nproperty double z\n")
    if shape.faces is not None:
        fh.write(f"element face {len(shape.faces)}\nproperty list uchar int vertex_indices\n")
    fh.write("end_header\n")
    for v in shape.vertices:
        fh.write(_row(v, digits) + "\n")
    if shape.faces is not None:
        for a, b, c in shape.faces:
            fh.write(f"3 {a} {b} {c}\n")


def _read_xyz(path: Path) -> Shape:
    pts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FormatError(path, f"expected 3 numbers, got {len(parts)}", lineno)
            pts.append(_floats(parts, path, lineno))
    return Shape(np.array(pts, dtype=np.float64).reshape(-1, 3))


def _write_xyz(shape: Shape, fh, digits: int):
    if shape.has_edges:
        raise ShapeError("XYZ cannot store connectivity; use OBJ or PLY")
    for v in shape.vertices:
        fh.write(_row(v, digits) + "\n")


def _ext(path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in FORMATS:
        raise FormatError(path, f"unknown shape format {ext!r}; expected one of {FORMATS}")
    return ext


def load_shape(path) -> Shape:
    path = Path(path)
    ext = _ext(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        return {".obj": _read_obj, ".ply": _read_ply, ".xyz": _read_xyz}[ext](path)
    except UnicodeDecodeError as exc:
        raise FormatError(path, f"not a text file ({exc.reason})") from None


def shape_text(shape: Shape, ext: str, digits: int = SHAPE_DIGITS) -> str:
    buf = io.StringIO()
    {".obj": _write_obj, ".ply": _write_ply, ".xyz": _write_xyz}[ext](shape, buf, digits)
    return buf.getvalue()


def save_shape(shape: Shape, path, digits: int = SHAPE_DIGITS) -> None:
    path = Path(path)
    text = shape_text(shape, _ext(path), digits)
    path.write_bytes(text.encode("ascii"))


def load_shape_dir(directory) -> list[tuple[str, Shape]]:
    """All shape files of a directory, in name order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: no such directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in FORMATS and p.is_file())
    return [(p.name, load_shape(p)) for p in files]


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def frame_name(t: int, T: int, ext: str) -> str:
    return f"frame_{t:0{max(4, len(str(T)))}d}{ext}"


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_trajectory(traj: Trajectory, directory) -> Path:
    """One file per frame, then ``manifest.json`` (written last, atomically)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    first = traj.frames[0]
    ext = ".obj" if first.has_edges else ".xyz"
    entries = []
    for t, frame in enumerate(traj.frames):
        name = frame_name(t, traj.T, ext)
        data = shape_text(frame, ext, FRAME_DIGITS).encode("ascii")
        (d / name).write_bytes(data)
        entry = {"file": name, "sha256": hashlib.sha256(data).hexdigest()}
        if traj.energies:
            entry["energy"] = traj.energies[t].as_dict()
        entries.append(entry)
    s = traj.schedule
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "T": s.T,
        "interval_i": s.interval_i,
        "mode": s.mode.value,
        "seed": s.seed,
        "eta": s.eta,
        "beta": [float(b) for b in s.beta],
        "beta_summary": {"min": float(s.beta.min()), "max": float(s.beta.max()),
                         "mean": float(s.beta.mean())},
        "anchor_id": traj.anchor_id,
        "template_id": traj.template_id,
        "frames": entries,
    }
    _atomic_write(d / MANIFEST, (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode())
    return d


def load_trajectory(directory) -> Trajectory:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise TrajectoryIOError(f"{d}: missing {MANIFEST}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise TrajectoryIOError(f"{mpath}: bad manifest ({exc})") from None
    if m.get("schema_version") != MANIFEST_SCHEMA:
        raise TrajectoryIOError(f"{mpath}: unsupported schema version {m.get('schema_version')}")
    if len(m["frames"]) != m["T"] + 1:
        raise TrajectoryIOError(f"{mpath}: {len(m['frames'])} frames listed for T={m['T']}")
    frames, energies = [], []
    for t, entry in enumerate(m["frames"]):
        p = d / entry["file"]
        if not p.is_file():
            raise TrajectoryIOError(f"{d}: missing frame {t} ({entry['file']})")
        if _sha256(p) != entry["sha256"]:
            raise TrajectoryIOError(f"{d}: checksum mismatch in frame {t} ({entry['file']})")
        frames.append(load_shape(p))
        if "energy" in entry:
            energies.append(EnergyReport(**entry["energy"]))
    schedule = DiffusionSchedule(m["T"], np.array(m["beta"]), interval_i=m["interval_i"],
                                 mode=Mode(m["mode"]), seed=m["seed"], eta=m["eta"])
    if energies and len(energies) != len(frames):
        raise TrajectoryIOError(f"{mpath}: energies listed for only some frames")
    try:
        return Trajectory(frames, schedule, m.get("anchor_id", ""), m.get("template_id", ""), energies)
    except ValueError as exc:
        raise TrajectoryIOError(f"{d}: {exc}") from None


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

PROFILES = ("pcl", "mesh", "face")


@dataclass
class AverageShapeConfig:
    npoints: int = 5000
    steps: int = 500
    lambda_c: float = 1.0
    lambda_e: float = 0.0
    lambda_n: float = 0.0
    lambda_l: float = 0.0
    lambda_p: float = 0.01
    eta: float = 1.0

    def weights(self, reduction: str = "mean") -> RegularizerWeights:
        return RegularizerWeights(lambda_n=self.lambda_n, lambda_l=self.lambda_l, lambda_e=self.lambda_e,
                                  lambda_p=self.lambda_p, lambda_c=self.lambda_c, eta=self.eta,
                                  reduction=reduction)


@dataclass
class DiffusionConfig:
    steps: int = 500
    lambda_c: float = 1.0
    lambda_e: float = 0.0
    lambda_n: float = 0.0
    lambda_l: float = 0.0
    lambda_p: float = 0.01
    eta: float = 1.0
    beta: float = 0.05
    interval: int = 50
    mode: str = "anchored_drift"
    knn_k: int = 8
    reduction: str = "mean"

    def weights(self) -> RegularizerWeights:
        return RegularizerWeights(lambda_n=self.lambda_n, lambda_l=self.lambda_l, lambda_e=self.lambda_e,
                                  lambda_p=self.lambda_p, lambda_c=self.lambda_c, eta=self.eta,
                                  reduction=self.reduction)

    def schedule(self, seed: int, T: int | None = None) -> DiffusionSchedule:
        return DiffusionSchedule.constant(self.steps if T is None else T, self.beta,
                                          interval_i=self.interval, mode=Mode(self.mode), seed=seed)


@dataclass
class ModelConfig:
    width: int = 64
    embed_dim: int = 64
    heads: int = 1
    latent_dim: int = 0
    time_conditioning: bool = True

    def hyperparams(self, T: int) -> Hyperparams:
        return Hyperparams(width=self.width, embed_dim=self.embed_dim, heads=self.heads,
                           latent_dim=self.latent_dim, time_conditioning=self.time_conditioning, T=T)


@dataclass
class TemplateConfig:
    source: str = "average"
    level: int = 4
    path: str = ""


@dataclass
class RunConfig:
    profile: str = "pcl"
    seed: int = 0
    average_shape: AverageShapeConfig = field(default_factory=AverageShapeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    template: TemplateConfig = field(default_factory=TemplateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        """Full config echo; loading it reproduces this object."""
        out = [f"[run]\nprofile = {self.profile}\nseed = {self.seed}\n"]
        for name in _SECTIONS:
            out.append(f"\n[{name}]\n")
            block = getattr(self, name)
            for f in dataclasses.fields(block):
                out.append(f"{f.name} = {_ini_value(getattr(block, f.name))}\n")
        return "".join(out)


_SECTIONS = ("average_shape", "diffusion", "training", "model", "template")

_CHOICES = {
    ("diffusion", "mode"): tuple(m.value for m in Mode),
    ("diffusion", "reduction"): ("mean", "sum"),
    ("training", "lr_schedule"): ("cosine", "constant"),
    ("template", "source"): ("icosphere", "file", "average"),
}


def _ini_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def profile_defaults(profile: str) -> RunConfig:
    """Defaults of the three task profiles."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    cfg = RunConfig(profile=profile)
    if profile in ("mesh", "face"):
        d = cfg.diffusion
        d.lambda_e, d.lambda_n, d.lambda_l = 0.8, 0.01, 0.15
        d.mode = Mode.TEMPLATE_DESCENT.value
    if profile == "mesh":
        cfg.diffusion.steps = 2000
        cfg.template = TemplateConfig(source="icosphere", level=4)
    if profile == "face":
        cfg.diffusion.eta = 0.1
        cfg.diffusion.beta = 0.01
        cfg.diffusion.interval = 1  # equispaced sampling off for faces
        cfg.template = TemplateConfig(source="file")
    return cfg


def _convert(section: str, key: str, raw: str, current):
    raw = raw.strip()
    where = f"[{section}] {key}"
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    choices = _CHOICES.get((section, key))
    if choices and raw not in choices:
        raise ConfigError(f"{where}: expected one of {choices}, got {raw!r}")
    return raw


def _parse_override(item: str) -> tuple[str, str, str]:
    key, sep, value = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    return section, name, value


def load_config(path=None, profile: str | None = None, overrides=()) -> RunConfig:
    """Read an INI file on top of the profile defaults, then apply overrides.

    ``profile`` (when given) wins over ``[run] profile`` in the file.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: no such config file")
        try:
            parser.read_string(p.read_text(), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    for item in overrides:
        section, name, value = _parse_override(item)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    for section in parser.sections():
        if section != "run" and section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    chosen = profile or parser.get("run", "profile", fallback="pcl")
    cfg = profile_defaults(chosen)
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == "run":
                if key == "profile":
                    continue
                if key != "seed":
                    raise ConfigError(f"unknown key [run] {key}")
                cfg.seed = _convert(section, key, raw, 0)
                continue
            block = getattr(cfg, section)
            names = {f.name for f in dataclasses.fields(block)}
            if key not in names:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(block, key, _convert(section, key, raw, getattr(block, key)))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    try:
        cfg.diffusion.weights()
        cfg.average_shape.weights()
        cfg.diffusion.schedule(cfg.seed)
        TrainConfig(**dataclasses.asdict(cfg.training))
        cfg.model.hyperparams(cfg.diffusion.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.average_shape.npoints < 1 or cfg.average_shape.steps < 0:
        raise ConfigError("[average_shape] needs npoints >= 1 and steps >= 0")
    if cfg.diffusion.knn_k < 1:
        raise ConfigError("[diffusion] knn_k must be >= 1")
    if cfg.template.source == "icosphere" and not 0 <= cfg.template.level <= 7:
        raise ConfigError("[template] level must be in 0..7")
