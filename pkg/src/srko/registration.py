"""Point-to-point rigid registration as a residual problem.

Poses are parameterized by a twist ``(omega, v)`` (rotation vector first)
and updated by left multiplication with ``exp(delta)``. Each correspondence
contributes a 3-vector block residual ``R p + t - q``; the robust kernel sees
its Euclidean norm.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from srko.errors import ConfigError, DomainError, UnderConstrainedError
from srko.solver import Linearization, ResidualProblem

INSTANCE_FORMAT = "srko-instance-v1"
POSE_TOL = 1e-9


def hat(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _so3_coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > POSE_TOL or abs(np.linalg.det(R) - 1.0) > POSE_TOL:
            raise DomainError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def orthonormality_error(self):
        R = self.rotation
        return max(float(np.max(np.abs(R.T @ R - np.eye(3)))), abs(float(np.linalg.det(R)) - 1.0))


def so3_exp(w):
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    A, B, _ = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R):
    R = np.asarray(R, dtype=np.float64)
    cos_t = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    theta = math.acos(cos_t)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-4:
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    if math.pi - theta > 1e-6:
        return theta / (2.0 * math.sin(theta)) * vee
    # near pi: axis from the dominant column of R + I
    M = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(M)))
    axis = M[:, k] / math.sqrt(max(M[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, vee) < 0:
        axis = -axis
    return theta * axis


def se3_exp(twist) -> Pose:
    """Exponential map; ``twist = (omega, v)`` with the rotation vector first."""
    xi = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise DomainError("twist must be finite")
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    A, B, C = _so3_coeffs(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return Pose(R, V @ v)


def se3_log(pose: Pose):
    w = so3_log(pose.rotation)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-4:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        A, B, _ = _so3_coeffs(theta)
        coef = (1.0 - A / (2.0 * B)) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([w, V_inv @ pose.translation])


# -- data ------------------------------------------------------------------------


def _points(points, name="points"):
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] == 0:
        raise DomainError(f"{name} must be a non-empty (N, 3) array, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise DomainError(f"{name} must be finite")
    return P


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index pairs ``(source, target)``; ``inlier_mask`` only for synthetic data."""

    pairs: np.ndarray
    inlier_mask: np.ndarray | None = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)
        if self.inlier_mask is not None:
            mask = np.asarray(self.inlier_mask, dtype=bool).reshape(-1)
            if mask.shape[0] != pairs.shape[0]:
                raise DomainError("inlier mask length does not match the number of pairs")
            object.__setattr__(self, "inlier_mask", mask)

    def __len__(self):
        return self.pairs.shape[0]

    def validate(self, n_source, n_target):
        p = self.pairs
        if np.any(p < 0) or np.any(p[:, 0] >= n_source) or np.any(p[:, 1] >= n_target):
            raise DomainError("correspondence index out of range")
        if len(np.unique(p[:, 0])) != len(p):
            raise DomainError("duplicate source index in correspondences")


def residuals_and_jacobian(pose: Pose, source, target, corr: CorrespondenceSet):
    """Scalar residuals ``|R p + t - q|``, their 3-vector blocks and block Jacobians.

    The Jacobian is taken with respect to a left perturbation
    ``exp(delta) * pose`` with ``delta = (omega, v)``, giving ``[-[y]_x, I]``
    for the transformed point ``y``.
    """
    if len(corr) < 3:
        raise UnderConstrainedError(f"need at least 3 correspondences, got {len(corr)}")
    P = source[corr.pairs[:, 0]]
    Q = target[corr.pairs[:, 1]]
    Y = P @ pose.rotation.T + pose.translation
    blocks = Y - Q
    x = np.sqrt(np.einsum("ij,ij->i", blocks, blocks))
    n = Y.shape[0]
    J = np.zeros((n, 3, 6))
    # -[y]_x
    J[:, 0, 1] = Y[:, 2]
    J[:, 0, 2] = -Y[:, 1]
    J[:, 1, 0] = -Y[:, 2]
    J[:, 1, 2] = Y[:, 0]
    J[:, 2, 0] = Y[:, 1]
    J[:, 2, 1] = -Y[:, 0]
    J[:, 0, 3] = J[:, 1, 4] = J[:, 2, 5] = 1.0
    return x, blocks, J


class RegistrationProblem(ResidualProblem):
    """Rigid alignment of ``source`` onto ``target`` over the given pairs."""

    dimension = 6

    def __init__(self, source, target, corr: CorrespondenceSet):
        self.source = _points(source, "source")
        self.target = _points(target, "target")
        corr.validate(len(self.source), len(self.target))
        if len(corr) < 3:
            raise UnderConstrainedError(f"need at least 3 correspondences, got {len(corr)}")
        self.corr = corr

    def evaluate(self, theta):
        x, blocks, J = residuals_and_jacobian(se3_exp(theta), self.source, self.target, self.corr)
        return Linearization(x, blocks, J)

    def retract(self, theta, delta):
        return se3_log(se3_exp(delta).compose(se3_exp(theta)))

    def pose(self, theta) -> Pose:
        return se3_exp(theta)


# -- synthetic instances -----------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_points: int = 1000
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    max_rotation: float = math.pi / 6
    max_translation: float = 0.3
    seed: int = 0
    geometry: str = "patches"
    n_patches: int = 8
    box_fraction: float = 0.2
    source_path: str | None = None

    def validate(self):
        if int(self.n_points) != self.n_points or self.n_points < 3:
            raise ConfigError(f"field 'n_points': must be an integer >= 3, got {self.n_points!r}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ConfigError(f"field 'noise_sigma': must be >= 0, got {self.noise_sigma!r}")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError(f"field 'outlier_fraction': must be in [0, 1), got {self.outlier_fraction!r}")
        for name in ("max_rotation", "max_translation"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"field '{name}': must be > 0, got {v!r}")
        if self.geometry not in ("patches", "box"):
            raise ConfigError(f"field 'geometry': must be 'patches' or 'box', got {self.geometry!r}")
        if not 0.0 <= self.box_fraction <= 1.0:
            raise ConfigError(f"field 'box_fraction': must be in [0, 1], got {self.box_fraction!r}")
        if self.n_patches < 1:
            raise ConfigError(f"field 'n_patches': must be >= 1, got {self.n_patches!r}")
        return self

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known - {"version"}
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(sorted(unknown))}")
        try:
            cfg = cls(**{k: v for k, v in data.items() if k in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


@dataclass(eq=False)
class RegistrationInstance:
    source: np.ndarray
    target: np.ndarray
    corr: CorrespondenceSet
    truth: Pose | None = None
    metadata: dict = field(default_factory=dict)

    def problem(self):
        return RegistrationProblem(self.source, self.target, self.corr)


def diameter(points):
    """Largest pairwise distance, exact (convex hull vertices, else brute force)."""
    P = _points(points)
    cand = P
    if len(P) > 64:
        try:
            cand = P[ConvexHull(P).vertices]
        except (QhullError, ValueError):
            cand = P
    best = 0.0
    for start in range(0, len(cand), 512):
        chunk = cand[start:start + 512]
        d2 = np.sum((chunk[:, None, :] - cand[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def normalize_cloud(points):
    """Center on the centroid and scale to unit diameter."""
    P = _points(points)
    P = P - P.mean(axis=0)
    d = diameter(P)
    if d == 0.0:
        raise DomainError("cannot normalize a cloud of coincident points")
    return P / d


def _sample_source(cfg, rng):
    n = cfg.n_points
    if cfg.geometry == "box":
        return rng.uniform(-0.5, 0.5, size=(n, 3))
    n_box = int(round(cfg.box_fraction * n))
    n_patch = n - n_box
    counts = np.bincount(rng.integers(cfg.n_patches, size=n_patch), minlength=cfg.n_patches)
    parts = [rng.uniform(-0.5, 0.5, size=(n_box, 3))]
    for count in counts:
        center = rng.uniform(-0.5, 0.5, size=3)
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        u = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        extent = rng.uniform(0.15, 0.4, size=2)
        st = rng.uniform(-1.0, 1.0, size=(count, 2)) * extent
        parts.append(center + st[:, :1] * u + st[:, 1:] * v)
    return np.concatenate(parts)


def random_pose(rng, max_rotation, max_translation):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_rotation)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, max_translation)
    return Pose(so3_exp(axis * angle), t)


def generate_synthetic(cfg: SyntheticConfig) -> RegistrationInstance:
    """Seeded instance: normalized source, noisy transformed target, corrupted pairs."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.source_path:
        raw = load_cloud(cfg.source_path)
        if len(raw) > cfg.n_points:
            raw = raw[np.sort(rng.choice(len(raw), cfg.n_points, replace=False))]
    else:
        raw = _sample_source(cfg, rng)
    source = normalize_cloud(raw)
    n = len(source)
    truth = random_pose(rng, cfg.max_rotation, cfg.max_translation)
    target = truth.apply(source) + rng.normal(0.0, cfg.noise_sigma, size=source.shape) if cfg.noise_sigma > 0 else truth.apply(source)

    n_out = int(math.floor(cfg.outlier_fraction * n))
    targets = np.arange(n)
    inlier = np.ones(n, dtype=bool)
    if n_out:
        out_idx = np.sort(rng.choice(n, n_out, replace=False))
        wrong = rng.integers(n - 1, size=n_out)
        wrong[wrong >= out_idx] += 1
        targets[out_idx] = wrong
        inlier[out_idx] = False
    corr = CorrespondenceSet(np.column_stack([np.arange(n), targets]), inlier)
    meta = {
        "seed": int(cfg.seed),
        "n_points": int(n),
        "noise_sigma": float(cfg.noise_sigma),
        "outlier_fraction": float(cfg.outlier_fraction),
        "n_outliers": n_out,
        "outlier_source_indices": [int(i) for i in np.flatnonzero(~inlier)],
        "max_rotation": float(cfg.max_rotation),
        "max_translation": float(cfg.max_translation),
        "geometry": "file" if cfg.source_path else cfg.geometry,
    }
    return RegistrationInstance(source, target, corr, truth, meta)


def rmse(estimated: Pose, instance: RegistrationInstance) -> float:
    """Root-mean-square point transfer error over all source points."""
    d = estimated.apply(instance.source) - instance.truth.apply(instance.source)
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", d, d))))


# -- file formats ------------------------------------------------------------------


def write_ply(path, points):
    P = _points(points)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(P)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in P.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """ASCII PLY reader returning the vertex x, y, z columns."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DomainError(f"{path}:1: not a PLY file")
    elements = []
    body = None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise DomainError(f"{path}:{lineno}: only ASCII PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise DomainError(f"{path}:{lineno}: property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                elements[-1][2].append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            body = lineno
            break
    if body is None:
        raise DomainError(f"{path}: missing end_header")
    row = body
    for name, count, props in elements:
        if name != "vertex":
            row += count
            continue
        names = [p[1] for p in props]
        try:
            cols = [names.index(k) for k in ("x", "y", "z")]
        except ValueError as exc:
            raise DomainError(f"{path}: vertex element lacks x/y/z properties") from exc
        if any(p[0] == "list" for p in props):
            raise DomainError(f"{path}: list properties on vertices are not supported")
        out = np.empty((count, 3))
        for k in range(count):
            lineno = row + k + 1
            if row + k >= len(lines):
                raise DomainError(f"{path}: expected {count} vertices, file ends at line {len(lines)}")
            tok = lines[row + k].split()
            try:
                out[k] = [float(tok[c]) for c in cols]
            except (ValueError, IndexError) as exc:
                raise DomainError(f"{path}:{lineno}: bad vertex row {lines[row + k]!r}") from exc
        return _points(out, str(path))
    raise DomainError(f"{path}: no vertex element")


def _read_csv_rows(path, ncols, cast):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != ncols:
                raise DomainError(f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}")
            try:
                rows.append([cast(p) for p in parts])
            except ValueError as exc:
                if not rows and lineno == 1:
                    continue  # header
                raise DomainError(f"{path}:{lineno}: {exc}") from exc
    return rows


def read_xyz_csv(path):
    return _points(np.array(_read_csv_rows(path, 3, float)).reshape(-1, 3), str(path))


def load_cloud(path):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    if path.suffix.lower() in (".csv", ".txt", ".xyz"):
        return read_xyz_csv(path)
    raise DomainError(f"{path}: unsupported point cloud format")


def read_correspondences(path):
    rows = _read_csv_rows(path, 2, int)
    return CorrespondenceSet(np.array(rows, dtype=np.int64).reshape(-1, 2))


def write_correspondences(path, corr: CorrespondenceSet):
    lines = ["source_index,target_index"] + [f"{s},{t}" for s, t in corr.pairs.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def pose_to_dict(pose: Pose):
    return {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}


def pose_from_dict(data):
    return Pose(np.array(data["rotation"]), np.array(data["translation"]))


def save_instance(instance: RegistrationInstance, outdir):
    """Write source.ply, target.ply, correspondences.csv and truth_pose.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_ply(outdir / "source.ply", instance.source)
    write_ply(outdir / "target.ply", instance.target)
    write_correspondences(outdir / "correspondences.csv", instance.corr)
    doc = {"format": INSTANCE_FORMAT}
    if instance.truth is not None:
        doc.update(pose_to_dict(instance.truth))
    doc["metadata"] = instance.metadata
    (outdir / "truth_pose.json").write_text(json.dumps(doc, indent=2) + "\n")
    return [outdir / n for n in ("source.ply", "target.ply", "correspondences.csv", "truth_pose.json")]


def _find(outdir, stem):
    for suffix in (".ply", ".csv", ".xyz", ".txt"):
        p = outdir / f"{stem}{suffix}"
        if p.exists():
            return p
    raise FileNotFoundError(f"{outdir}: missing {stem}.ply or {stem}.csv")


def load_instance(outdir) -> RegistrationInstance:
    outdir = Path(outdir)
    source = load_cloud(_find(outdir, "source"))
    target = load_cloud(_find(outdir, "target"))
    cpath = outdir / "correspondences.csv"
    if not cpath.exists():
        raise FileNotFoundError(f"{outdir}: missing correspondences.csv")
    corr = read_correspondences(cpath)
    truth, meta = None, {}
    tpath = outdir / "truth_pose.json"
    if tpath.exists():
        doc = json.loads(tpath.read_text())
        if "rotation" in doc:
            truth = pose_from_dict(doc)
        meta = doc.get("metadata", {})
        outliers = meta.get("outlier_source_indices")
        if outliers is not None:
            mask = ~np.isin(corr.pairs[:, 0], outliers)
            corr = CorrespondenceSet(corr.pairs, mask)
    corr.validate(len(source), len(target))
    return RegistrationInstance(source, target, corr, truth, meta)


def config_dict(cfg: SyntheticConfig):
    return asdict(cfg)
