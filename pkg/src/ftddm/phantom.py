"""Synthetic brain metabolite phantoms, k-space degradation and splits.

A phantom subject is a small 3D head: an ellipsoidal brain with a cortical
gray-matter ribbon, deep gray nuclei, ventricles and an optional tumor with
surrounding edema. Axial slices through it give co-registered maps for seven
metabolites plus T1- and FLAIR-like anatomical images. The quality-filtering
mask drops random voxels near the skull, mimicking lipid contamination.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

METABOLITES = ("tCr", "tCho", "NAA", "Glu", "Ins", "Gln", "Gly")
LR_SIZES = tuple(range(8, 33, 2))
CHANNELS = METABOLITES + ("mask", "t1", "flair")

# (gray matter, white matter, csf, tumor core, edema) relative concentrations.
# tCr, NAA and Glu are higher in gray matter than in white matter.
_CONTRAST = {
    "tCr": (1.00, 0.72, 0.10, 0.55, 0.80),
    "tCho": (0.70, 0.85, 0.08, 1.60, 1.00),
    "NAA": (1.00, 0.78, 0.08, 0.25, 0.60),
    "Glu": (1.00, 0.55, 0.08, 0.45, 0.60),
    "Ins": (0.75, 0.85, 0.10, 1.40, 1.10),
    "Gln": (0.70, 0.55, 0.10, 1.50, 0.90),
    "Gly": (0.45, 0.40, 0.05, 1.60, 0.80),
}
_T1 = (0.55, 0.90, 0.12, 0.35, 0.60)
_FLAIR = (0.60, 0.48, 0.05, 0.85, 1.00)


@dataclass
class PhantomSpec:
    seed: int = 0
    size: int = 64
    n_slices: int = 6
    brain_axes: tuple = ((0.70, 0.82), (0.80, 0.92))
    cortex_fraction: tuple = (0.78, 0.86)
    ventricle_scale: tuple = (0.08, 0.16)
    tumor_prob: float = 0.75
    tumor_radius: tuple = (0.10, 0.25)
    texture_amplitude: float = 0.12
    boundary_dropout: float = 0.35
    boundary_width: int = 4
    smoothing: float = 0.8


@dataclass
class ImageField:
    values: np.ndarray
    mask: np.ndarray
    metabolite: str = ""
    subject: str = ""
    slice_id: int = 0

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask must share a shape")


@dataclass
class PhantomSlice:
    maps: dict
    mask: np.ndarray
    t1: np.ndarray
    flair: np.ndarray
    regions: dict = field(default_factory=dict)
    subject: str = ""
    slice_id: int = 0

    def field(self, metabolite) -> ImageField:
        return ImageField(self.maps[metabolite], self.mask, metabolite, self.subject, self.slice_id)

    def stack(self) -> np.ndarray:
        """(10, H, W) float32 array in :data:`CHANNELS` order."""
        chans = [self.maps[m] for m in METABOLITES] + [self.mask, self.t1, self.flair]
        return np.stack(chans).astype(np.float32)


def _ellipse(xx, yy, cx, cy, ax, ay, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2


def _smooth_field(rng, size, scale):
    noise = rng.standard_normal((size, size))
    f = ndimage.gaussian_filter(noise, scale)
    return f / (f.std() + 1e-12)


def _largest_component(mask):
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def normalize_map(values, mask, percentile=99.0):
    """Scale by the in-mask percentile and clip to [0, 1]; zero outside."""
    inside = values[mask > 0]
    ref = np.percentile(inside, percentile) if inside.size else 1.0
    out = np.clip(values / max(ref, 1e-12), 0.0, 1.0)
    return out * (mask > 0)


def _subject_geometry(spec: PhantomSpec, rng):
    g = {
        "ax": rng.uniform(*spec.brain_axes[0]),
        "ay": rng.uniform(*spec.brain_axes[1]),
        "angle": rng.uniform(-0.15, 0.15),
        "cx": rng.uniform(-0.04, 0.04),
        "cy": rng.uniform(-0.04, 0.04),
        "cortex": rng.uniform(*spec.cortex_fraction),
        "vent": rng.uniform(*spec.ventricle_scale),
        "nuclei": [(rng.uniform(0.18, 0.30), rng.uniform(-0.1, 0.15), rng.uniform(0.07, 0.11))
                   for _ in range(2)],
        "tumor": None,
        "scale": rng.uniform(0.85, 1.15),
    }
    if rng.random() < spec.tumor_prob:
        r = rng.uniform(*spec.tumor_radius)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.15, 0.45)
        g["tumor"] = {
            "cx": g["cx"] + dist * np.cos(ang), "cy": g["cy"] + dist * np.sin(ang),
            "cz": rng.uniform(-0.3, 0.3), "r": r, "edema": rng.uniform(1.4, 1.9),
            "necrotic": rng.random() < 0.4,
        }
    return g


def _render_slice(spec: PhantomSpec, g, z, rng):
    n = spec.size
    lin = (np.arange(n) + 0.5) / n * 2 - 1
    xx, yy = np.meshgrid(lin, lin)
    # cross-section of an ellipsoid shrinks away from the equator
    shrink = np.sqrt(max(1.0 - z ** 2, 0.05))
    brain = _ellipse(xx, yy, g["cx"], g["cy"], g["ax"] * shrink, g["ay"] * shrink, g["angle"]) <= 1
    inner = _ellipse(xx, yy, g["cx"], g["cy"], g["ax"] * shrink * g["cortex"],
                     g["ay"] * shrink * g["cortex"], g["angle"]) <= 1
    csf = np.zeros_like(brain)
    if abs(z) < 0.45:
        for side in (-1, 1):
            csf |= _ellipse(xx, yy, g["cx"] + side * 0.09, g["cy"] - 0.05, g["vent"] * 0.7,
                            g["vent"] * 2.2 * (1 - abs(z)), side * 0.3) <= 1
    nuclei = np.zeros_like(brain)
    if abs(z) < 0.5:
        for off, dy, r in g["nuclei"]:
            for side in (-1, 1):
                nuclei |= _ellipse(xx, yy, g["cx"] + side * off, g["cy"] + dy, r, r * 1.4) <= 1

    gm = (brain & ~inner) | (nuclei & inner)
    wm = inner & ~nuclei
    csf &= inner
    gm &= ~csf
    wm &= ~csf

    core = np.zeros_like(brain)
    edema = np.zeros_like(brain)
    t = g["tumor"]
    if t is not None and abs(z - t["cz"]) < t["r"] * t["edema"]:
        rz2 = (z - t["cz"]) ** 2
        d2 = (xx - t["cx"]) ** 2 + (yy - t["cy"]) ** 2 + rz2
        core = (d2 <= t["r"] ** 2) & brain
        edema = (d2 <= (t["r"] * t["edema"]) ** 2) & brain & ~core

    tissues = [gm, wm, csf, core, edema]
    fractions = [ndimage.gaussian_filter(m.astype(float), spec.smoothing) for m in tissues]
    # tumor and edema override underlying tissue
    override = np.clip(fractions[3] + fractions[4], 0, 1)
    base = [f * (1 - override) for f in fractions[:3]]
    weights = base + fractions[3:]

    def mix(contrast):
        return sum(w * c for w, c in zip(weights, contrast))

    brain_soft = brain.astype(float)
    maps = {}
    for met in METABOLITES:
        texture = 1 + spec.texture_amplitude * _smooth_field(rng, n, 3.0)
        if t is not None and t["necrotic"]:
            texture = texture * (1 - 0.7 * ndimage.gaussian_filter(
                ((xx - t["cx"]) ** 2 + (yy - t["cy"]) ** 2 <= (0.4 * t["r"]) ** 2).astype(float) * core, 1.0))
        maps[met] = np.clip(mix(_CONTRAST[met]) * texture * g["scale"], 0, None)

    t1 = np.clip(mix(_T1) * brain_soft, 0, 1)
    flair = np.clip(mix(_FLAIR) * brain_soft, 0, 1)
    t1 = t1 / max(t1.max(), 1e-12)
    flair = flair / max(flair.max(), 1e-12)

    # quality filtering: random dropout in a rim near the skull
    dist = ndimage.distance_transform_edt(brain)
    rim = (dist > 0) & (dist <= spec.boundary_width)
    drop = rim & (rng.random((n, n)) < spec.boundary_dropout * (1 - dist / (spec.boundary_width + 1)))
    drop = ndimage.binary_dilation(drop, iterations=1) & rim
    mask = _largest_component(brain & ~drop)
    mask = ndimage.binary_fill_holes(mask)
    mask = mask.astype(np.float64)

    maps = {m: normalize_map(v, mask) for m, v in maps.items()}
    regions = {"gm": gm & (mask > 0), "wm": wm & (mask > 0), "csf": csf, "tumor": core}
    return maps, mask, t1, flair, regions


def generate_subject(spec: PhantomSpec, subject: str = "", max_retries: int = 8):
    """All axial slices of one phantom subject; same seed gives the same subject."""
    for attempt in range(max_retries):
        rng = np.random.default_rng([spec.seed, attempt])
        g = _subject_geometry(spec, rng)
        zs = np.linspace(-0.55, 0.55, spec.n_slices) if spec.n_slices > 1 else np.zeros(1)
        slices = []
        ok = True
        for k, z in enumerate(zs):
            maps, mask, t1, flair, regions = _render_slice(spec, g, float(z), rng)
            if mask.sum() < 16:
                ok = False
                break
            slices.append(PhantomSlice(maps, mask, t1, flair, regions, subject, k))
        if ok:
            return slices
    raise RuntimeError(f"phantom seed {spec.seed}: empty mask after {max_retries} retries")


def generate_phantom(spec: PhantomSpec, slice_index: int | None = None) -> PhantomSlice:
    """A single slice (the central one by default)."""
    slices = generate_subject(spec)
    return slices[len(slices) // 2 if slice_index is None else slice_index]


# ------------------------------------------------------------ degradation

def upscaling_factor(size: int, L: int) -> float:
    return size / L


def _window_1d(n, L):
    """Boolean mask over fftshift-ed frequencies.

    Keeps indices [-L/2, L/2) minus the unpaired -L/2 bin when L < n, so the
    window is conjugate-symmetric and the zero-filled image stays real.
    """
    k = np.arange(n) - n // 2
    if L == n:
        return np.ones(n, dtype=bool)
    return np.abs(k) < L // 2


def kspace_truncate(hr, L: int, mask=None):
    """Low-resolution k-space coefficients and the zero-filled image.

    Returns ``(lr_coeffs, zero_filled)`` where ``lr_coeffs`` is the central
    L x L block [-L/2, L/2) of the centred spectrum and ``zero_filled`` is
    the H x W reconstruction from it, re-masked when ``mask`` is given.
    """
    hr = np.asarray(hr, dtype=np.float64)
    H, W = hr.shape
    if L % 2 or L < 2 or L > min(H, W):
        raise ValueError(f"L must be even and in [2, {min(H, W)}], got {L}")
    spec = np.fft.fftshift(np.fft.fft2(hr))
    r0, c0 = H // 2 - L // 2, W // 2 - L // 2
    lr_coeffs = spec[r0:r0 + L, c0:c0 + L].copy()
    win = np.outer(_window_1d(H, L), _window_1d(W, L))
    zero_filled = np.fft.ifft2(np.fft.ifftshift(spec * win)).real
    if mask is not None:
        zero_filled = zero_filled * mask
    return lr_coeffs, zero_filled


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_rotate: float = 0.5
    max_angle: float = 15.0
    p_translate: float = 0.5
    max_shift: int = 4


def augment_sample(channels, mask, rng, cfg: AugmentConfig = AugmentConfig()):
    """Apply one random rigid transform to every channel of a sample.

    ``channels`` is (C, H, W) of continuous images, ``mask`` (H, W). Returns
    transformed (channels, mask); metabolite channels should be re-masked by
    the caller with the returned mask.
    """
    x = np.asarray(channels, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if rng.random() < cfg.p_flip:
        x, m = x[:, :, ::-1], m[:, ::-1]
    if rng.random() < cfg.p_flip:
        x, m = x[:, ::-1, :], m[::-1, :]
    if rng.random() < cfg.p_rotate:
        ang = rng.uniform(-cfg.max_angle, cfg.max_angle)
        x = ndimage.rotate(x, ang, axes=(2, 1), reshape=False, order=1, mode="constant")
        m = ndimage.rotate(m, ang, axes=(1, 0), reshape=False, order=0, mode="constant")
    if rng.random() < cfg.p_translate:
        dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
        x = ndimage.shift(x, (0, dy, dx), order=0, mode="constant")
        m = ndimage.shift(m, (dy, dx), order=0, mode="constant")
    return np.ascontiguousarray(x), np.ascontiguousarray(m)


def augment(batch, rng, cfg: AugmentConfig = AugmentConfig()):
    """Augment a list of (values, mask, t1, flair) tuples consistently."""
    out = []
    for values, mask, t1, flair in batch:
        chans, m = augment_sample(np.stack([values, t1, flair]), mask, rng, cfg)
        out.append((chans[0] * m, m, chans[1], chans[2]))
    return out


# ------------------------------------------------------------------ splits

def make_splits(n_subjects: int, fold: int, n_folds: int = 5, seed: int = 0):
    """Subject-disjoint (train, val, test) index lists for one CV fold.

    Subjects are shuffled once per ``seed`` and cut into ``n_folds`` groups;
    fold k tests on group k and validates on group k+1.
    """
    if n_subjects < n_folds:
        raise ValueError(f"need at least {n_folds} subjects, got {n_subjects}")
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold must be in [0, {n_folds})")
    order = np.random.default_rng(seed).permutation(n_subjects)
    sizes = [n_subjects // n_folds] * n_folds
    for i in range(n_subjects % n_folds):
        sizes[n_folds - 1 - i] += 1
    groups = np.split(order, np.cumsum(sizes)[:-1])
    test = sorted(groups[fold].tolist())
    val = sorted(groups[(fold + 1) % n_folds].tolist())
    train = sorted(i for i in range(n_subjects) if i not in set(test) | set(val))
    return train, val, test


# ------------------------------------------------------------- disk format

SLICE_MAGIC = b"FTDSLICE"
SLICE_VERSION = 1


def write_slice(path, arr: np.ndarray):
    """Header: magic (8 bytes), version u32, C u32, H u32, W u32, dtype code
    u32 (1 = little-endian float32); then C*H*W float32 values, C order."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(SLICE_MAGIC)
        fh.write(struct.pack("<5I", SLICE_VERSION, c, h, w, 1))
        fh.write(arr.tobytes())


def read_slice(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != SLICE_MAGIC:
        raise ValueError(f"{path}: not a slice file")
    version, c, h, w, code = struct.unpack_from("<5I", data, 8)
    if version != SLICE_VERSION or code != 1:
        raise ValueError(f"{path}: unsupported slice version/dtype ({version}, {code})")
    return np.frombuffer(data, dtype="<f4", offset=28, count=c * h * w).reshape(c, h, w).copy()


def generate_dataset(out_dir, n_subjects: int, seed: int = 0, n_slices: int = 6, size: int = 64):
    """Write a phantom dataset: one directory per subject plus manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n_subjects).tolist()
    subjects = []
    for i, s in enumerate(seeds):
        sid = f"subject_{i:03d}"
        (out / sid).mkdir(exist_ok=True)
        slices = generate_subject(PhantomSpec(seed=int(s), n_slices=n_slices, size=size), sid)
        entries = []
        for sl in slices:
            rel = f"{sid}/slice_{sl.slice_id:02d}.bin"
            write_slice(out / rel, sl.stack())
            entries.append({"id": sl.slice_id, "file": rel})
        subjects.append({"id": sid, "seed": int(s), "slices": entries})
    manifest = {"format": "ftddm-phantom", "version": 1, "seed": seed, "height": size, "width": size,
                "channels": list(CHANNELS), "metabolites": list(METABOLITES), "subjects": subjects}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


@dataclass
class Dataset:
    """In-memory slices: ``data`` is (N, 10, H, W) in :data:`CHANNELS` order."""

    data: np.ndarray
    subject_of: np.ndarray
    subjects: list
    metabolites: tuple = METABOLITES

    @property
    def size(self):
        return self.data.shape[-1]

    def slice_indices(self, subject_ids):
        wanted = set(subject_ids)
        return [i for i, s in enumerate(self.subject_of) if s in wanted]

    def images(self, subject_ids):
        """(slice, metabolite) pairs for the given subject indices."""
        return [(i, m) for i in self.slice_indices(subject_ids) for m in range(len(self.metabolites))]

    def sample(self, slice_idx, met_idx):
        d = self.data[slice_idx]
        nm = len(self.metabolites)
        return d[met_idx], d[nm], d[nm + 1], d[nm + 2]


def load_dataset(root) -> Dataset:
    root = Path(root)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json (not a dataset directory)")
    manifest = json.loads(man_path.read_text())
    arrays, owner = [], []
    for k, subj in enumerate(manifest["subjects"]):
        for entry in subj["slices"]:
            arrays.append(read_slice(root / entry["file"]))
            owner.append(k)
    if not arrays:
        raise ValueError(f"{root}: dataset has no slices")
    nm = len(manifest["metabolites"])
    if arrays[0].shape[0] != nm + 3:
        raise ValueError(f"{root}: expected {nm + 3} channels per slice")
    return Dataset(np.stack(arrays).astype(np.float64), np.array(owner),
                   [s["id"] for s in manifest["subjects"]], tuple(manifest["metabolites"]))
