"""Seedable synthetic RGB-D corpora: textured boxes and cylinders at distinct
depths over a back wall, with per-pixel ground truth.

Stands in for real capture. Two wall geometries (a flat near wall and a
sloped deep wall) give every corpus a two-class scene-classification
benchmark where depth is the informative cue; the optional color-camouflage
mode paints objects in the wall color so depth becomes the only boundary
cue."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import CameraIntrinsics, RgbdFrame, SegmentMask, read_pgm16, save_frame, write_pgm16
from .inference import SceneLabeling

SCENE_TYPES = ("boxroom", "corridor")

# class id -> (name, shape, size range in px across, base color)
# sizes start at ~26px so the ~1px halo of proposal masks stays above IoU
# 0.85; the panel sits nearly flush on the wall (a few cm proud), so its
# small-sigma proposals are crisp while large-sigma ones are big and sloppy,
# the realistic failure mode for confidence-only conflict resolution
CLASS_DEFS = {
    1: ("crate", "box", (26, 34), (0.85, 0.25, 0.22)),
    2: ("locker", "box", (34, 44), (0.22, 0.78, 0.28)),
    3: ("drum", "cylinder", (26, 34), (0.25, 0.35, 0.88)),
    4: ("barrel", "cylinder", (34, 44), (0.92, 0.86, 0.25)),
    5: ("panel", "box", (38, 50), (0.30, 0.86, 0.88)),
    6: ("pillar", "cylinder", (28, 40), (0.85, 0.30, 0.82)),
    7: ("bin", "box", (26, 34), (0.95, 0.55, 0.20)),
    8: ("pipe", "cylinder", (26, 34), (0.55, 0.40, 0.15)),
}
FLUSH_CLASSES = {5}  # depth offset a few cm instead of free-standing
MIN_OBJECT_PIXELS = 100
TEXTURE_STD = 0.05


def _texture(rng, shape):
    """Spatially correlated color texture; per-pixel white noise is both
    unrealistic and adversarial for gradient-based boundary estimation."""
    noise = rng.standard_normal(shape + (3,))
    for c in range(3):
        noise[..., c] = ndimage.gaussian_filter(noise[..., c], 1.2)
    return TEXTURE_STD * 2.5 * noise  # roughly restore the pre-blur contrast


@dataclass
class SyntheticScene:
    frame: RgbdFrame
    truth: SceneLabeling       # owner_map holds instance indices, -1 = wall
    object_classes: list      # class id per instance
    scene_class: str


def _wall(rng, width, height, scene_class):
    xs = np.arange(width) / width
    if scene_class == "boxroom":
        base = rng.uniform(3.4, 4.0)
        depth = np.full((height, width), base)
        depth += 0.1 * (np.arange(height) / height)[:, None]
    else:  # corridor: strongly sloped wall
        near = rng.uniform(2.0, 2.4)
        depth = near + 2.2 * xs[None, :] * np.ones((height, 1))
    return depth


def _object_geometry(rng, class_id, width, height):
    _, shape, (lo, hi), _ = CLASS_DEFS[class_id]
    size = rng.uniform(lo, hi)
    if shape == "box":
        w_px = int(round(size * rng.uniform(0.85, 1.15)))
        h_px = int(round(size * rng.uniform(0.85, 1.15)))
    else:
        w_px = int(round(size * rng.uniform(0.8, 1.0)))
        h_px = int(round(size * rng.uniform(1.0, 1.3)))
    w_px = min(w_px, width - 8)
    h_px = min(h_px, height - 8)
    return shape, w_px, h_px


def _footprint(shape, w_px, h_px):
    if shape == "box":
        return np.ones((h_px, w_px), dtype=bool)
    yy, xx = np.mgrid[0:h_px, 0:w_px]
    cy, cx = (h_px - 1) / 2, (w_px - 1) / 2
    return (((xx - cx) / (w_px / 2)) ** 2 + ((yy - cy) / (h_px / 2)) ** 2) <= 1.0


def _free_position(rng, occupied, w_px, h_px, margin=3, clearance=1):
    """A random top-left position whose clearance-dilated bounding box is
    entirely unoccupied, or None. Exhaustive via prefix sums, so tightly
    packed scenes still place objects wherever space exists."""
    height, width = occupied.shape
    hh, ww = h_px + 2 * clearance, w_px + 2 * clearance
    v_lo, u_lo = margin - clearance, margin - clearance
    v_hi = height - margin - h_px - clearance  # inclusive
    u_hi = width - margin - w_px - clearance
    if v_hi < v_lo or u_hi < u_lo:
        return None
    s = np.zeros((height + 1, width + 1), dtype=np.int64)
    np.cumsum(np.cumsum(occupied, axis=0), axis=1, out=s[1:, 1:])
    vs = np.arange(v_lo, v_hi + 1)
    us = np.arange(u_lo, u_hi + 1)
    sums = (s[np.ix_(vs + hh, us + ww)] - s[np.ix_(vs, us + ww)]
            - s[np.ix_(vs + hh, us)] + s[np.ix_(vs, us)])
    free_v, free_u = np.nonzero(sums == 0)
    if len(free_v) == 0:
        return None
    pick = int(rng.integers(len(free_v)))
    return (int(vs[free_v[pick]] + clearance), int(us[free_u[pick]] + clearance))


def generate_scene(width, height, classes, rng, camouflage=False,
                   forced_class=None) -> SyntheticScene:
    """One random scene; `forced_class` (an id or a sequence of ids)
    guarantees those classes appear."""
    if not 1 <= classes <= len(CLASS_DEFS):
        raise ValueError(f"classes must be in 1..{len(CLASS_DEFS)}")
    scene_class = SCENE_TYPES[int(rng.integers(len(SCENE_TYPES)))]
    depth = _wall(rng, width, height, scene_class)
    wall_color = rng.uniform(0.35, 0.65, size=3)
    rgb = np.clip(wall_color[None, None, :] + _texture(rng, (height, width)), 0, 1)
    illumination = rng.uniform(0.82, 1.18)  # per-scene lighting change

    class_map = np.zeros((height, width), dtype=np.int32)
    owner_map = np.full((height, width), -1, dtype=np.int32)
    occupied = np.zeros((height, width), dtype=bool)
    fx = fy = 0.9 * width

    n_objects = int(rng.integers(4, 7))
    if forced_class is None:
        forced = []
    elif np.isscalar(forced_class):
        forced = [int(forced_class)]
    else:
        forced = [int(c) for c in forced_class]
    wanted = list(forced)
    while len(wanted) < max(n_objects, len(wanted)):
        wanted.append(int(rng.integers(1, classes + 1)))

    # draw all geometries up front and place the large ones first (greedy
    # packing fits far more objects that way); the first forced class goes
    # unconditionally first so it is guaranteed a spot on the empty canvas,
    # remaining forced classes go before their size peers
    geometry = [(cid,) + _object_geometry(rng, cid, width, height)
                for cid in wanted]

    def rank(i):
        if forced and i == 0:
            tier = 0
        elif i < len(forced):
            tier = 1
        else:
            tier = 2
        return (tier, -geometry[i][2] * geometry[i][3])

    order = sorted(range(len(geometry)), key=rank)

    object_classes = []
    for slot in order:
        class_id, shape, w_px, h_px = geometry[slot]
        placed = False
        for _ in range(8):
            spot = _free_position(rng, occupied, w_px, h_px)
            if spot is None:
                break
            y0, x0 = spot
            footprint = _footprint(shape, w_px, h_px)
            if footprint.sum() < MIN_OBJECT_PIXELS:
                break
            y_lo, y_hi = max(0, y0 - 1), min(height, y0 + h_px + 1)
            x_lo, x_hi = max(0, x0 - 1), min(width, x0 + w_px + 1)
            region = (slice(y0, y0 + h_px), slice(x0, x0 + w_px))
            wall_min = depth[region][footprint].min()
            if wall_min - 0.5 <= 0.7:
                continue
            if class_id in FLUSH_CLASSES:
                # proud enough to out-gradient a sloped wall, flush enough
                # that large-sigma proposals stay sloppy
                obj_depth = depth[region] - rng.uniform(0.06, 0.12)
            else:
                z0 = rng.uniform(0.7, min(2.8, wall_min - 0.5))
                obj_depth = np.full((h_px, w_px), z0)
                if shape == "box":
                    tilt = rng.uniform(-0.02, 0.02)
                    obj_depth += tilt * (np.arange(w_px)
                                         / max(w_px - 1, 1))[None, :]
                else:
                    # lateral bulge of a vertical cylinder seen by a pinhole
                    t = np.linspace(-1.0, 1.0, w_px)
                    radius_m = (w_px / 2) * z0 / fx
                    obj_depth += radius_m * (1.0 - np.sqrt(
                        np.maximum(1 - t**2, 0.0)))[None, :]

            if camouflage:
                color = wall_color
            else:
                # instance-level color jitter keeps recognition honest: the
                # per-class regressors must generalize, not memorize one hue
                color = np.clip(np.asarray(CLASS_DEFS[class_id][3])
                                + rng.uniform(-0.08, 0.08, 3), 0.05, 0.95)
            texture = _texture(rng, (h_px, w_px))

            idx = len(object_classes)
            patch_depth = depth[region]
            patch_depth[footprint] = obj_depth[footprint]
            patch_rgb = rgb[region]
            patch_rgb[footprint] = np.clip(
                color[None, :] + texture[footprint], 0, 1)
            class_map[region][footprint] = class_id
            owner_map[region][footprint] = idx
            occupied[region] |= footprint
            object_classes.append(class_id)
            placed = True
            break
        if not placed:
            continue

    frame = RgbdFrame(np.clip(rgb * illumination, 0, 1), depth,
                      CameraIntrinsics(fx, fy, width / 2.0, height / 2.0))
    truth = SceneLabeling(class_map=class_map, owner_map=owner_map)
    return SyntheticScene(frame=frame, truth=truth,
                          object_classes=object_classes,
                          scene_class=scene_class)


# -- corpus on disk -----------------------------------------------------------

def class_legend(classes: int) -> dict:
    return {cid: CLASS_DEFS[cid][0] for cid in range(1, classes + 1)}


def write_corpus(out_dir, count, classes, seed, width=96, height=72,
                 camouflage=False, train_frac=0.7) -> None:
    """Frames, ground truth, scene labels, and the train/test split."""
    if count < 1:
        raise ValueError("count must be >= 1")
    frames_dir = os.path.join(out_dir, "frames")
    gt_dir = os.path.join(out_dir, "gt")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)

    scene_lines, split_lines = [], []
    n_train = int(np.ceil(train_frac * count))
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        # two rotating forced classes keep per-class instance counts balanced
        forced = ((index % classes) + 1,
                  ((index + classes // 2) % classes) + 1)
        scene = generate_scene(width, height, classes, rng,
                               camouflage=camouflage,
                               forced_class=forced if classes > 1 else forced[:1])
        stem = f"{index:04d}"
        save_frame(frames_dir, stem, scene.frame)
        write_pgm16(os.path.join(gt_dir, f"{stem}_classes.pgm"),
                    scene.truth.class_map.astype(np.uint16))
        write_pgm16(os.path.join(gt_dir, f"{stem}_instances.pgm"),
                    (scene.truth.owner_map + 1).astype(np.uint16))
        with open(os.path.join(gt_dir, f"{stem}_objects.txt"), "w") as fh:
            for inst, cid in enumerate(scene.object_classes):
                fh.write(f"{inst} {cid}\n")
        scene_lines.append(f"{stem} {scene.scene_class}\n")
        split_lines.append(f"{stem} {'train' if index < n_train else 'test'}\n")

    with open(os.path.join(out_dir, "legend.txt"), "w") as fh:
        for cid, name in class_legend(classes).items():
            fh.write(f"{cid} {name}\n")
    with open(os.path.join(out_dir, "scene_labels.txt"), "w") as fh:
        fh.writelines(scene_lines)
    with open(os.path.join(out_dir, "split.txt"), "w") as fh:
        fh.writelines(split_lines)
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        fh.write(f"count = {count}\nclasses = {classes}\nseed = {seed}\n"
                 f"width = {width}\nheight = {height}\n"
                 f"camouflage = {str(camouflage).lower()}\n")


class Corpus:
    """Read access to a corpus directory written by write_corpus."""

    def __init__(self, root):
        self.root = root
        split_path = os.path.join(root, "split.txt")
        if not os.path.exists(split_path):
            raise FileNotFoundError(f"{split_path} is missing; not a corpus?")
        self.split = {}
        with open(split_path) as fh:
            for line in fh:
                stem, part = line.split()
                self.split[stem] = part
        self.stems = sorted(self.split)
        self.scene_labels = {}
        with open(os.path.join(root, "scene_labels.txt")) as fh:
            for line in fh:
                stem, label = line.split()
                self.scene_labels[stem] = label
        self.legend = {}
        with open(os.path.join(root, "legend.txt")) as fh:
            for line in fh:
                cid, name = line.split()
                self.legend[int(cid)] = name

    def stems_for(self, part=None):
        if part is None:
            return list(self.stems)
        return [s for s in self.stems if self.split[s] == part]

    def frame_paths(self, stem):
        frames = os.path.join(self.root, "frames")
        return (os.path.join(frames, f"{stem}_rgb.ppm"),
                os.path.join(frames, f"{stem}_depth.pgm"),
                os.path.join(frames, f"{stem}_intrinsics.txt"))

    def load_frame(self, stem) -> RgbdFrame:
        from .imaging import load_frame

        color, depth, intr = self.frame_paths(stem)
        return load_frame(color, depth, intr)

    def load_truth(self, stem) -> SceneLabeling:
        gt = os.path.join(self.root, "gt")
        class_map = read_pgm16(os.path.join(gt, f"{stem}_classes.pgm")).astype(np.int32)
        owner = read_pgm16(os.path.join(gt, f"{stem}_instances.pgm")).astype(np.int32) - 1
        return SceneLabeling(class_map=class_map, owner_map=owner)

    def load_gt_objects(self, stem):
        """[(class_id, SegmentMask)] in instance order."""
        truth = self.load_truth(stem)
        classes = {}
        with open(os.path.join(self.root, "gt", f"{stem}_objects.txt")) as fh:
            for line in fh:
                inst, cid = (int(tok) for tok in line.split())
                classes[inst] = cid
        out = []
        for inst in sorted(classes):
            bits = truth.owner_map == inst
            if bits.any():
                out.append((classes[inst], SegmentMask(bits)))
        return out
