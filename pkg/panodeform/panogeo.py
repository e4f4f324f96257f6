# -*- coding: utf-8 -*-
"""Mundos esféricos sintéticos y sus proyecciones.

Un :class:`SphereWorld` etiqueta cada dirección de la esfera unitaria
(cielo, suelo, muro y objetos rectangulares o elípticos en coordenadas
de azimut/elevación). La misma escena se puede proyectar como panorama
equirectangular o como cámara pinhole de FoV estrecho, de modo que la
única diferencia entre dominios es la geometría de la proyección (más un
ruido de apariencia suave definido sobre la esfera).

Convenciones:

    * ``phi`` es el ángulo polar medido desde el cenit, ``theta`` el
      azimut en ``[0, 2 pi)``; ``z`` apunta hacia arriba.
    * La columna central del panorama (``theta = pi``) es el frente; una
      cámara pinhole con ``yaw = 0`` mira hacia allí.

"""
import hashlib
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np

from panodeform import S
from panodeform import logger
from panodeform.exceptions import AspectRatioError
from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import InvalidFov
from panodeform.exceptions import InvalidSize
from panodeform.exceptions import MissingSplit
from panodeform.schemas import DatasetManifest
from panodeform.schemas import Domain
from panodeform.schemas import LabeledScene
from panodeform.schemas import SceneEntry
from panodeform.schemas import SceneSpec
from panodeform.utils.tensor_file import load_array
from panodeform.utils.tensor_file import save_array

PathLike = Union[str, Path]

SKY, GROUND, WALL = 0, 1, 2

NOISE_WAVES = 6

SPLITS = ("source", "target", "test", "source_test")


@dataclass(frozen=True)
class SphereObject:
    """Región en coordenadas de azimut/elevación (radianes)."""

    label: int
    shape: str
    theta: float
    elevation: float
    half_width: float
    half_height: float
    color: Tuple[float, float, float]

    def contains(self, theta: np.ndarray, elevation: np.ndarray) -> np.ndarray:
        d_theta = np.angle(np.exp(1j * (theta - self.theta)))
        d_elev = elevation - self.elevation
        if self.shape == "rect":
            return (np.abs(d_theta) <= self.half_width) & (
                np.abs(d_elev) <= self.half_height
            )
        # elipse en el plano tangente: el ancho angular real no se estira
        scale = np.cos(self.elevation)
        return (d_theta * scale / self.half_width) ** 2 + (
            d_elev / self.half_height
        ) ** 2 <= 1.0


@dataclass
class SphereWorld:
    """Etiquetado procedural de la esfera unitaria."""

    classes: int
    seed: int
    sky_elevation: float
    ground_elevation: float
    palette: np.ndarray
    noise_level: float
    wave_vectors: np.ndarray
    wave_phases: np.ndarray
    objects: List[SphereObject] = field(default_factory=list)

    def labels_at(self, directions: np.ndarray) -> np.ndarray:
        """Clase de cada dirección ``... x 3``."""
        theta, elevation = to_angles(directions)
        labels = np.full(theta.shape, GROUND, dtype=np.int64)
        if self.classes == 2:
            labels[elevation >= self.ground_elevation] = SKY
        else:
            labels[elevation >= self.ground_elevation] = WALL
            labels[elevation >= self.sky_elevation] = SKY
        for obj in self.objects:
            labels[obj.contains(theta, elevation)] = obj.label
        return labels

    def colors_at(self, directions: np.ndarray) -> np.ndarray:
        """Colores ``... x 3`` en ``[0, 1]``."""
        labels = self.labels_at(directions)
        colors = self.palette[labels]
        theta, elevation = to_angles(directions)
        for obj in self.objects:
            inside = obj.contains(theta, elevation)
            colors[inside] = np.asarray(obj.color)
        waves = np.sin(directions @ self.wave_vectors.T + self.wave_phases)
        noise = (waves[..., :3] + waves[..., 3:]) / 2
        return np.clip(colors + self.noise_level * noise, 0.0, 1.0)


def to_angles(directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Azimut en ``[0, 2 pi)`` y elevación en ``[-pi/2, pi/2]``."""
    azimuth = np.arctan2(directions[..., 1], directions[..., 0])
    theta = np.mod(azimuth, 2 * np.pi)
    elevation = np.arcsin(np.clip(directions[..., 2], -1.0, 1.0))
    return theta, elevation


def from_spherical(phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            np.sin(phi) * np.cos(theta),
            np.sin(phi) * np.sin(theta),
            np.cos(phi),
        ],
        axis=-1,
    )


def class_palette(classes: int, layout_seed: int) -> np.ndarray:
    """Colores base por clase, compartidos por todos los mundos de un spec."""
    rng = np.random.default_rng([int(layout_seed), zlib.crc32(b"palette")])
    hues = (np.arange(classes) / classes + rng.uniform(0, 1)) % 1.0
    # tonos equiespaciados con luminosidad alternada
    value = np.where(np.arange(classes) % 2 == 0, 0.85, 0.55)
    palette = np.stack(
        [
            value * (0.5 + 0.5 * np.cos(2 * np.pi * (hues + shift)))
            for shift in (0.0, 1 / 3, 2 / 3)
        ],
        axis=-1,
    )
    return np.clip(palette, 0.05, 0.95)


def object_classes(classes: int) -> List[int]:
    if classes >= 4:
        return list(range(3, classes))
    if classes == 3:
        return [WALL]
    return []


def generate_sphere_world(spec: SceneSpec, seed: int) -> "SphereWorld":
    """Mundo determinista en ``(spec, seed)``."""
    rng = np.random.default_rng([int(spec.layout_seed), int(seed)])
    palette = class_palette(spec.classes, spec.layout_seed)
    sky = float(rng.uniform(0.25, 0.45))
    ground = float(rng.uniform(-0.4, -0.2))
    if spec.classes == 2:
        ground = float(rng.uniform(-0.15, 0.15))
    wave_vectors = rng.normal(0.0, 6.0, size=(NOISE_WAVES, 3))
    wave_phases = rng.uniform(0, 2 * np.pi, size=NOISE_WAVES)

    candidates = object_classes(spec.classes)
    count = 0
    if candidates:
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for _ in range(count):
        label = int(rng.choice(candidates))
        jitter = rng.uniform(-0.06, 0.06, size=3)
        color = np.clip(palette[label] + jitter, 0.0, 1.0)
        objects.append(
            SphereObject(
                label=label,
                shape=str(rng.choice(["rect", "ellipse"])),
                theta=float(rng.uniform(0, 2 * np.pi)),
                elevation=float(rng.uniform(-0.35, 0.7)),
                half_width=float(rng.uniform(0.15, 0.5)),
                half_height=float(rng.uniform(0.12, 0.4)),
                color=tuple(float(c) for c in color),
            )
        )
    return SphereWorld(
        classes=spec.classes,
        seed=int(seed),
        sky_elevation=sky,
        ground_elevation=ground,
        palette=palette,
        noise_level=spec.noise,
        wave_vectors=wave_vectors,
        wave_phases=wave_phases,
        objects=objects,
    )


def equirectangular_directions(height: int, width: int) -> np.ndarray:
    """Dirección del centro de cada pixel: ``phi = pi (i + .5) / H``,
    ``theta = 2 pi (j + .5) / W``."""
    phi = np.pi * (np.arange(height) + 0.5) / height
    theta = 2 * np.pi * (np.arange(width) + 0.5) / width
    phi, theta = np.meshgrid(phi, theta, indexing="ij")
    return from_spherical(phi, theta)


def render_equirectangular(
    world: SphereWorld, height: int, width: int, scene_id: str = "panorama"
) -> LabeledScene:
    if height <= 0 or width <= 0:
        raise InvalidSize(size=(height, width), op="render_equirectangular")
    if width != 2 * height:
        raise AspectRatioError(height=height, width=width)
    directions = equirectangular_directions(height, width)
    return LabeledScene(
        id=scene_id,
        domain=Domain.panorama,
        image=world.colors_at(directions),
        labels=world.labels_at(directions),
    )


def camera_frame(yaw: float, pitch: float) -> np.ndarray:
    """Filas ``forward, right, up`` de la cámara en coordenadas del mundo.

    ``right`` apunta hacia azimut creciente, igual que las columnas del
    panorama.

    """
    theta = np.pi + yaw
    forward = np.array(
        [
            np.cos(pitch) * np.cos(theta),
            np.cos(pitch) * np.sin(theta),
            np.sin(pitch),
        ]
    )
    right = np.array([-np.sin(theta), np.cos(theta), 0.0])
    up = np.array(
        [
            -np.sin(pitch) * np.cos(theta),
            -np.sin(pitch) * np.sin(theta),
            np.cos(pitch),
        ]
    )
    return np.stack([forward, right, up])


def pinhole_directions(  # pylint: disable=too-many-arguments
    height: int, width: int, fov_deg: float, yaw: float, pitch: float
) -> np.ndarray:
    if not 0 < fov_deg < 180:
        raise InvalidFov(fov=fov_deg)
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    u = (np.arange(width) + 0.5 - width / 2) / focal
    v = (np.arange(height) + 0.5 - height / 2) / focal
    v, u = np.meshgrid(v, u, indexing="ij")
    forward, right, up = camera_frame(yaw, pitch)
    rays = (
        forward[None, None]
        + u[..., None] * right[None, None]
        - v[..., None] * up[None, None]
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def render_pinhole(  # pylint: disable=too-many-arguments
    world: SphereWorld,
    height: int,
    width: int,
    fov_deg: float,
    yaw: float,
    pitch: float,
    scene_id: str = "pinhole",
) -> LabeledScene:
    """Proyección perspectiva del mismo mundo (ángulos en radianes)."""
    if height <= 0 or width <= 0:
        raise InvalidSize(size=(height, width), op="render_pinhole")
    directions = pinhole_directions(height, width, fov_deg, yaw, pitch)
    return LabeledScene(
        id=scene_id,
        domain=Domain.pinhole,
        image=world.colors_at(directions),
        labels=world.labels_at(directions),
        yaw=float(yaw),
        pitch=float(pitch),
    )


def panorama_footprint(  # pylint: disable=too-many-arguments
    yaw: float,
    pitch: float,
    fov_deg: float,
    height: int,
    width: int,
    pano_height: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel del panorama (fila, columna) que contiene cada rayo pinhole."""
    directions = pinhole_directions(height, width, fov_deg, yaw, pitch)
    theta, elevation = to_angles(directions)
    phi = np.pi / 2 - elevation
    rows = np.clip(
        np.floor(phi / np.pi * pano_height).astype(np.int64),
        0,
        pano_height - 1,
    )
    cols = np.floor(theta / (2 * np.pi) * 2 * pano_height).astype(np.int64)
    return rows, np.mod(cols, 2 * pano_height)


# Datasets --------------------------------------------------------------------


@dataclass(frozen=True)
class _Job:
    split: str
    index: int
    scene_seed: int


def _scene_seed(seed: int, split: str, index: int) -> int:
    sequence = np.random.SeedSequence(
        [int(seed), zlib.crc32(b"world"), zlib.crc32(split.encode()), index]
    )
    return int(sequence.generate_state(1)[0])


def _render_job(spec: SceneSpec, job: _Job) -> LabeledScene:
    world = generate_sphere_world(spec, job.scene_seed)
    scene_id = "{}_{:04d}".format(job.split, job.index)
    if job.split in ("source", "source_test"):
        rng = np.random.default_rng([job.scene_seed, zlib.crc32(b"view")])
        yaw = float(rng.uniform(-np.pi, np.pi))
        pitch = float(
            rng.uniform(-1, 1) * np.radians(spec.max_pitch_deg)
        )
        return render_pinhole(
            world,
            spec.pinhole_size,
            spec.pinhole_size,
            spec.fov_deg,
            yaw,
            pitch,
            scene_id=scene_id,
        )
    scene = render_equirectangular(
        world, spec.panorama_height, spec.panorama_width, scene_id=scene_id
    )
    if job.split == "target":
        return scene.copy(update={"labels": None})
    return scene


def _write_scene(root: Path, split: str, scene: LabeledScene) -> SceneEntry:
    image_path = Path(split) / (scene.id + "_image.pdt")
    save_array(root / image_path, scene.image)
    labels_path = None
    if scene.labels is not None:
        labels_path = Path(split) / (scene.id + "_labels.pdt")
        save_array(root / labels_path, scene.labels.astype(np.float64))
    return SceneEntry(
        id=scene.id,
        domain=scene.domain,
        image=image_path.as_posix(),
        labels=labels_path.as_posix() if labels_path else None,
        height=scene.height,
        width=scene.width,
        yaw=scene.yaw,
        pitch=scene.pitch,
    )


def build_datasets(  # pylint: disable=too-many-arguments
    spec: SceneSpec,
    n_source: int,
    n_target: int,
    n_test: int,
    seed: int,
    out_dir: PathLike,
    n_source_test: int = 8,
    threads: Optional[int] = None,
) -> DatasetManifest:
    """Renderiza y escribe los splits y ``manifest.json`` en ``out_dir``.

    Las escenas se renderizan en un pool de threads acotado por
    ``S.THREADS``; el manifest conserva el orden de envío.

    """
    counts = {
        "source": n_source,
        "target": n_target,
        "test": n_test,
        "source_test": n_source_test,
    }
    for split, count in counts.items():
        if count < 1:
            raise InvalidSize(size=count, op="build_datasets." + split)
    root = Path(out_dir)
    jobs = [
        _Job(split, index, _scene_seed(seed, split, index))
        for split in SPLITS
        for index in range(counts[split])
    ]

    def work(job: _Job) -> Tuple[str, SceneEntry]:
        scene = _render_job(spec, job)
        return job.split, _write_scene(root, job.split, scene)

    entries = {split: [] for split in SPLITS}
    with ThreadPoolExecutor(max_workers=threads or S.THREADS) as pool:
        for split, entry in pool.map(work, jobs):
            entries[split].append(entry)

    manifest = DatasetManifest(classes=spec.classes, seed=seed, **entries)
    write_manifest(root, manifest)
    logger.info(
        "dataset generado",
        out_dir=str(root),
        **{split: len(items) for split, items in entries.items()}
    )
    return manifest


def write_manifest(root: PathLike, manifest: DatasetManifest) -> Path:
    path = Path(root) / "manifest.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.json(indent=2))
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return path


def load_manifest(root: PathLike) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        payload = json.loads(path.read_text())
    except (OSError, ValueError) as error:
        raise DatasetIOError(path=path, detail=error)
    return DatasetManifest(**payload)


def split_entries(manifest: DatasetManifest, split: str) -> List[SceneEntry]:
    if split not in SPLITS:
        raise MissingSplit(split=split)
    entries = getattr(manifest, split)
    if not entries:
        raise MissingSplit(split=split)
    return entries


def load_scene(entry: SceneEntry, root: PathLike) -> LabeledScene:
    """Lee una entrada del manifest; los panoramas objetivo vuelven sin
    labels."""
    root = Path(root)
    image = load_array(root / entry.image)
    labels = None
    if entry.labels is not None:
        labels = load_array(root / entry.labels).astype(np.int64)
    return LabeledScene(
        id=entry.id,
        domain=entry.domain,
        image=image,
        labels=labels,
        yaw=entry.yaw,
        pitch=entry.pitch,
    )


def load_split(root: PathLike, manifest: DatasetManifest, split: str):
    return [load_scene(e, root) for e in split_entries(manifest, split)]


def checksum(root: PathLike, manifest: DatasetManifest) -> str:
    """sha256 de todos los archivos en el orden del manifest."""
    root = Path(root)
    digest = hashlib.sha256()
    for split in SPLITS:
        for entry in getattr(manifest, split):
            for relative in (entry.image, entry.labels):
                if relative is None:
                    continue
                try:
                    digest.update((root / relative).read_bytes())
                except OSError as error:
                    raise DatasetIOError(path=root / relative, detail=error)
    return digest.hexdigest()

