"""KITTI-format ingestion, dataset filtering and synthetic LiDAR scenes.

On disk a dataset follows the KITTI object layout::

    root/velodyne/<id>.bin   packed little-endian float32 (x, y, z, r)
    root/label_2/<id>.txt    15-column labels (16 with a score for results)
    root/calib/<id>.txt      optional; identity calibration when absent
    root/manifest.json       written by the generator and CLI commands
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from focal3d.errors import DomainError, GenerationError, ParseError
from focal3d.geometry import Box3D, bev_intersection, normalize_yaw
from focal3d.voxel import PointCloud

log = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "moderate", "hard")
# synthetic frames: minimum support per difficulty level
SUPPORT_LEVELS = (120, 40, 0)


# calibration ----------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    """Rectification (3x3) and LiDAR-to-camera (3x4) transforms.

    The identity calibration only applies the fixed KITTI axis convention
    (camera x right, y down, z forward) with no offset.
    """

    r0_rect: np.ndarray
    velo_to_cam: np.ndarray

    @classmethod
    def identity(cls):
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        return cls(np.eye(3), tr)

    def lidar_to_cam(self, pts):
        pts = np.atleast_2d(pts)
        return (self.r0_rect @ (self.velo_to_cam[:, :3] @ pts.T + self.velo_to_cam[:, 3:])).T

    def cam_to_lidar(self, pts):
        pts = np.atleast_2d(pts)
        rot = self.velo_to_cam[:, :3]
        unrect = np.linalg.solve(self.r0_rect, pts.T)
        return np.linalg.solve(rot, unrect - self.velo_to_cam[:, 3:]).T


def parse_calib(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, _, rest = line.partition(":")
            try:
                values[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
    try:
        r0 = values["R0_rect"].reshape(3, 3)
        tr = values["Tr_velo_to_cam"].reshape(3, 4)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"missing or malformed calibration entry: {exc}", path=path) from None
    return Calibration(r0, tr)


def write_calib(path, calib):
    with open(path, "w") as fh:
        fh.write("R0_rect: " + " ".join(f"{v:.12e}" for v in calib.r0_rect.ravel()) + "\n")
        fh.write("Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in calib.velo_to_cam.ravel()) + "\n")


# labels ---------------------------------------------------------------------

@dataclass(frozen=True)
class Label:
    """One annotated (or detected) object with its box in the LiDAR frame."""

    name: str
    box: Box3D
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = -10.0
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)
    score: float | None = None
    difficulty: int = -1
    support: int = 0


def camera_to_box(h, w, l, x, y, z, ry, calib):
    """KITTI camera-frame annotation (bottom-center location) to a LiDAR Box3D."""
    bottom = calib.cam_to_lidar(np.array([x, y, z]))[0]
    return Box3D((bottom[0], bottom[1], bottom[2] + h / 2.0), (l, w, h), -ry - math.pi / 2.0)


def box_to_camera(box, calib):
    """Inverse of :func:`camera_to_box`: (h, w, l, x, y, z, ry)."""
    l, w, h = box.size
    bottom = np.array([box.center[0], box.center[1], box.center[2] - h / 2.0])
    x, y, z = calib.lidar_to_cam(bottom)[0]
    return h, w, l, x, y, z, normalize_yaw(-box.yaw - math.pi / 2.0)


def parse_labels(path, calib=None, with_score=None):
    """Read a KITTI label (or result) file; DontCare rows are skipped."""
    calib = calib or Calibration.identity()
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            n = len(fields)
            if n not in (15, 16) or (with_score is True and n != 16):
                raise ParseError(f"expected 15 or 16 columns, got {n}", path=path, line=lineno)
            if fields[0] == "DontCare":
                continue
            try:
                nums = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
            trunc, occ, alpha = nums[0], int(nums[1]), nums[2]
            bbox = tuple(nums[3:7])
            h, w, l, x, y, z, ry = nums[7:14]
            try:
                box = camera_to_box(h, w, l, x, y, z, ry, calib)
            except DomainError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
            score = nums[14] if n == 16 else None
            labels.append(Label(fields[0], box, trunc, occ, alpha, bbox, score))
    return labels


def format_label(label, calib=None):
    calib = calib or Calibration.identity()
    h, w, l, x, y, z, ry = box_to_camera(label.box, calib)
    nums = [label.truncated, label.occluded, label.alpha, *label.bbox, h, w, l, x, y, z, ry]
    text = label.name + " " + " ".join(f"{v:.10g}" for v in nums)
    if label.score is not None:
        text += f" {label.score:.10g}"
    return text


def write_labels(path, labels, calib=None):
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(format_label(lab, calib) + "\n")


def kitti_difficulty(label):
    """Official KITTI level from 2D height, occlusion and truncation (-1: none)."""
    height = label.bbox[3] - label.bbox[1]
    for level, (min_h, max_occ, max_trunc) in enumerate(((40, 0, 0.15), (25, 1, 0.30), (25, 2, 0.50))):
        if height >= min_h and label.occluded <= max_occ and label.truncated <= max_trunc:
            return level
    return -1


def support_difficulty(support):
    for level, need in enumerate(SUPPORT_LEVELS):
        if support >= need:
            return level
    return len(SUPPORT_LEVELS) - 1


# point clouds ---------------------------------------------------------------

def load_velodyne(path):
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ParseError(f"truncated point record ({len(raw)} bytes is not a multiple of 16)",
                         path=path, offset=len(raw) - len(raw) % 16)
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts.astype(np.float64))


def write_velodyne(path, cloud):
    np.asarray(cloud.points, dtype="<f4").tofile(path)


# frames ---------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    id: str
    cloud: PointCloud
    labels: tuple = ()
    n_removed: int = 0

    @property
    def boxes(self):
        return [lab.box for lab in self.labels]


def count_support(cloud, box):
    return int(box.contains(cloud.points).sum())


def attach_support(cloud, labels, rule="kitti"):
    """Recompute each label's support from the cloud and set its difficulty."""
    out = []
    for lab in labels:
        support = count_support(cloud, lab.box)
        level = support_difficulty(support) if rule == "support" else kitti_difficulty(lab)
        out.append(replace(lab, support=support, difficulty=level))
    return tuple(out)


def filter_sparse_boxes(frame, min_points=10):
    """Drop labels supported by fewer than ``min_points`` points."""
    if min_points < 0:
        raise DomainError(f"min_points must be >= 0, got {min_points}")
    kept = tuple(lab for lab in frame.labels if lab.support >= min_points)
    removed = len(frame.labels) - len(kept)
    if removed:
        log.debug("frame %s: removed %d sparse boxes", frame.id, removed)
    return replace(frame, labels=kept, n_removed=frame.n_removed + removed)


def split_train_val(ids, seed=0, out_dir=None):
    """Seeded disjoint halves; the first half gets the extra id when odd."""
    ids = list(ids)
    if not ids:
        raise DomainError("cannot split an empty id list")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = (len(ids) + 1) // 2
    train = sorted(ids[i] for i in perm[:n_train])
    val = sorted(ids[i] for i in perm[n_train:])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.txt").write_text("".join(f"{i}\n" for i in train))
        (out / "val.txt").write_text("".join(f"{i}\n" for i in val))
    return train, val


def read_split(path):
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def list_frame_ids(root):
    return sorted(p.stem for p in (Path(root) / "velodyne").glob("*.bin"))


def read_manifest(root):
    path = Path(root) / "manifest.json"
    return json.loads(path.read_text()) if path.exists() else {}


def load_frame(root, frame_id, difficulty_rule=None, class_name="Car"):
    root = Path(root)
    if difficulty_rule is None:
        difficulty_rule = "support" if read_manifest(root).get("synthetic") else "kitti"
    cloud = load_velodyne(root / "velodyne" / f"{frame_id}.bin")
    calib_path = root / "calib" / f"{frame_id}.txt"
    calib = parse_calib(calib_path) if calib_path.exists() else Calibration.identity()
    label_path = root / "label_2" / f"{frame_id}.txt"
    labels = parse_labels(label_path, calib) if label_path.exists() else []
    if class_name is not None:
        labels = [lab for lab in labels if lab.name == class_name]
    return Frame(frame_id, cloud, attach_support(cloud, labels, difficulty_rule))


def write_frame(root, frame, calib=None):
    root = Path(root)
    for sub in ("velodyne", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_velodyne(root / "velodyne" / f"{frame.id}.bin", frame.cloud)
    write_labels(root / "label_2" / f"{frame.id}.txt", frame.labels, calib)
    if calib is not None:
        (root / "calib").mkdir(exist_ok=True)
        write_calib(root / "calib" / f"{frame.id}.txt", calib)


def load_dataset(root, ids=None, min_points=10, difficulty_rule=None):
    ids = list_frame_ids(root) if ids is None else ids
    return [filter_sparse_boxes(load_frame(root, i, difficulty_rule), min_points) for i in ids]


# synthetic scenes -----------------------------------------------------------

@dataclass(frozen=True)
class SceneRecipe:
    """Parameters of a synthetic street scene.

    Objects are cars standing on the ground plane; distractors are unlabeled
    boxes (poles, hedges) that give the detector hard negatives.
    """

    n_objects: tuple = (1, 4)
    size_mean: tuple = (3.9, 1.6, 1.56)
    size_std: tuple = (0.2, 0.08, 0.08)
    points_per_object: tuple = (30, 250)
    clutter_points: int = 800
    ground_z: float = -1.73
    seed: int = 0
    x_range: tuple = (2.0, 25.6)
    y_range: tuple = (-12.8, 12.8)
    n_distractors: tuple = (0, 0)
    distractor_points: tuple = (30, 120)
    class_name: str = "Car"

    def __post_init__(self):
        for name in ("n_objects", "points_per_object", "n_distractors", "distractor_points", "x_range", "y_range"):
            lo, hi = getattr(self, name)
            if hi < lo or (name != "x_range" and name != "y_range" and lo < 0):
                raise DomainError(f"recipe field {name} must be a nonempty nonnegative range, got {(lo, hi)}")
        if self.clutter_points < 0 or min(self.size_mean) <= 0 or min(self.size_std) < 0:
            raise DomainError("recipe sizes and counts must be nonnegative (means positive)")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


_FACES = (
    # (axis, sign): outward normal along local axis
    (0, 1), (0, -1), (1, 1), (1, -1), (2, 1),
)


def _surface_points(rng, box, n, sensor=(0.0, 0.0, 0.0), inset=1e-3):
    """``n`` points on the faces of ``box`` that face the sensor (plus the roof)."""
    (cx, cy, cz), (l, w, h), yaw = box.center, box.size, box.yaw
    c, s = math.cos(yaw), math.sin(yaw)
    half = np.array([l, w, h]) / 2
    rel = np.array(sensor) - np.array([cx, cy, cz])
    rel_local = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
    faces, areas = [], []
    for axis, sign in _FACES:
        if sign * rel_local[axis] > half[axis]:
            other = [a for a in range(3) if a != axis]
            faces.append((axis, sign, other))
            areas.append(4 * half[other[0]] * half[other[1]])
    if not faces:
        faces = [(2, 1, [0, 1])]
        areas = [4 * half[0] * half[1]]
    probs = np.array(areas) / np.sum(areas)
    which = rng.choice(len(faces), size=n, p=probs)
    local = np.empty((n, 3))
    for i, (axis, sign, other) in enumerate(faces):
        m = which == i
        k = int(m.sum())
        local[m, axis] = sign * (half[axis] - inset)
        for o in other:
            local[m, o] = rng.uniform(-half[o] + inset, half[o] - inset, size=k)
    world = np.empty_like(local)
    world[:, 0] = cx + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = cy + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = cz + local[:, 2]
    return world


def _place(rng, recipe, size, placed, retries=200, clearance=0.3):
    l, w, h = size
    reach = 0.5 * math.hypot(l, w)
    (x_lo, x_hi), (y_lo, y_hi) = recipe.x_range, recipe.y_range
    if x_hi - x_lo < 2 * reach or y_hi - y_lo < 2 * reach:
        raise GenerationError("scene extent too small for the requested object size")
    for _ in range(retries):
        box = Box3D(
            (rng.uniform(x_lo + reach, x_hi - reach), rng.uniform(y_lo + reach, y_hi - reach), recipe.ground_z + h / 2),
            size,
            rng.uniform(-math.pi, math.pi),
        )
        grown = Box3D(box.center, (l + 2 * clearance, w + 2 * clearance, h), box.yaw)
        if all(bev_intersection(grown, other) == 0.0 for other in placed):
            return box
    raise GenerationError(f"could not place an object after {retries} attempts")


def generate_scene(recipe, frame_id=None):
    """Cars (labeled), distractors (unlabeled) and ground clutter."""
    rng = np.random.default_rng(recipe.seed)
    n_obj = int(rng.integers(recipe.n_objects[0], recipe.n_objects[1] + 1))
    n_dis = int(rng.integers(recipe.n_distractors[0], recipe.n_distractors[1] + 1))
    mean, std = np.array(recipe.size_mean), np.array(recipe.size_std)
    placed, labels, chunks = [], [], []
    for _ in range(n_obj):
        size = tuple(np.maximum(rng.normal(mean, std), 0.5 * mean))
        box = _place(rng, recipe, size, placed)
        placed.append(box)
        n_pts = int(rng.integers(recipe.points_per_object[0], recipe.points_per_object[1] + 1))
        xyz = _surface_points(rng, box, n_pts)
        chunks.append(np.c_[xyz, rng.uniform(0.2, 1.0, n_pts)])
        labels.append(Label(recipe.class_name, box, alpha=normalize_yaw(-box.yaw - math.pi / 2)))
    for _ in range(n_dis):
        if rng.random() < 0.5:
            side = rng.uniform(0.2, 0.5)
            size = (side, side, rng.uniform(1.5, 3.0))
        else:
            size = (rng.uniform(2.0, 5.0), rng.uniform(0.4, 1.0), rng.uniform(0.8, 1.6))
        box = _place(rng, recipe, size, placed)
        placed.append(box)
        n_pts = int(rng.integers(recipe.distractor_points[0], recipe.distractor_points[1] + 1))
        xyz = _surface_points(rng, box, n_pts)
        chunks.append(np.c_[xyz, rng.uniform(0.0, 1.0, n_pts)])
    n_c = recipe.clutter_points
    (x_lo, x_hi), (y_lo, y_hi) = recipe.x_range, recipe.y_range
    clutter = np.c_[
        rng.uniform(x_lo, x_hi, n_c), rng.uniform(y_lo, y_hi, n_c),
        recipe.ground_z + np.abs(rng.normal(0.0, 0.03, n_c)), rng.uniform(0.0, 0.3, n_c),
    ]
    chunks.append(clutter)
    cloud = PointCloud(np.concatenate(chunks).astype("<f4").astype(np.float64))
    frame_id = frame_id if frame_id is not None else f"{recipe.seed:06d}"
    return Frame(frame_id, cloud, attach_support(cloud, labels, "support"))


def generate_dataset(root, recipe, count, seed=0, calib=None):
    """Write ``count`` scenes with per-frame seeds derived from ``seed``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(max(count, 1))[:count]
    ids = []
    for i, s in enumerate(seeds):
        frame = generate_scene(replace(recipe, seed=int(s)), frame_id=f"{i:06d}")
        write_frame(root, frame, calib)
        ids.append(frame.id)
    return ids


def dataset_digest(root):
    """Stable content digest of a dataset directory (for run manifests)."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for sub in ("velodyne", "label_2", "calib"):
        d = root / sub
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            h.update(f"{sub}/{p.name}".encode())
            h.update(p.read_bytes())
    return h.hexdigest()


__all__ = [
    "Calibration", "Label", "Frame", "SceneRecipe", "DIFFICULTIES",
    "parse_calib", "write_calib", "parse_labels", "write_labels", "format_label",
    "load_velodyne", "write_velodyne", "load_frame", "write_frame", "load_dataset",
    "filter_sparse_boxes", "split_train_val", "read_split", "list_frame_ids",
    "generate_scene", "generate_dataset", "attach_support", "count_support",
    "kitti_difficulty", "support_difficulty", "dataset_digest", "read_manifest",
]
