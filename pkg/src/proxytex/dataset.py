"""Dataset container, on-disk manifest schema, and loaders.

Layout on disk::

    <root>/manifest.json
    <root>/images/<instance>/view_####.png      8/16-bit RGBA, straight alpha
    <root>/proxies/<instance>/<role>_{hull,analytic}.obj

The manifest (JSON, format_version 1) records shared intrinsics and
near/far, the fixed proxy role order, pose ranges, and per instance: the
generator spec (when synthetic), proxy file paths per role, and per view
the image path, orbit parameters, and the explicit camera-from-world
rotation/translation. All views share intrinsics; every instance carries
exactly the same proxy roles.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetSchemaError
from .geometry import CameraIntrinsics, Pose, ProxyMesh, load_proxy_obj
from .imaging import RgbaImage, premultiply, read_image

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class ViewRecord:
    """One posed view; the image may live on disk or in memory."""

    pose: Pose
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    distance: float = 0.0
    image_path: Path | None = None
    image: RgbaImage | None = None

    def get_rgba(self) -> RgbaImage:
        """Straight-alpha image, loaded on demand."""
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise DatasetSchemaError("view has neither image nor image_path")
        return read_image(self.image_path)

    def get_premultiplied(self) -> RgbaImage:
        return premultiply(self.get_rgba())


@dataclass
class DatasetInstance:
    instance_id: str
    proxies: dict[str, ProxyMesh]
    views: list[ViewRecord]
    spec: "object | None" = None
    analytic_proxies: dict[str, ProxyMesh] | None = None
    seed: int | None = None


@dataclass
class Dataset:
    """In-memory dataset; ``load_dataset`` builds one from a directory."""

    intrinsics: CameraIntrinsics
    proxy_roles: list[str]
    instances: list[DatasetInstance]
    pose_ranges: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self) -> None:
        if not self.proxy_roles:
            raise DatasetSchemaError("proxy_roles must be non-empty")
        seen = set()
        for inst in self.instances:
            if inst.instance_id in seen:
                raise DatasetSchemaError(f"duplicate instance id {inst.instance_id!r}")
            seen.add(inst.instance_id)
            if sorted(inst.proxies) != sorted(self.proxy_roles):
                raise DatasetSchemaError(
                    f"instance {inst.instance_id!r} has proxy roles "
                    f"{sorted(inst.proxies)}, dataset declares "
                    f"{sorted(self.proxy_roles)}"
                )
            if not inst.views:
                raise DatasetSchemaError(
                    f"instance {inst.instance_id!r} has no views"
                )

    @property
    def num_proxies(self) -> int:
        return len(self.proxy_roles)

    def instance(self, instance_id: str) -> DatasetInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(f"unknown instance {instance_id!r}")

    def proxies_of(self, instance_id: str) -> list[ProxyMesh]:
        """Proxy meshes in the dataset's fixed role order."""
        inst = self.instance(instance_id)
        return [inst.proxies[r] for r in self.proxy_roles]


def split_views(dataset: Dataset, holdout_fraction: float = 0.02,
                seed: int = 0) -> tuple[dict, dict]:
    """Seeded per-instance train/holdout split by uniform sampling.

    Returns ({instance_id: [train view indices]}, {instance_id: [holdout
    view indices]}); at least one view is held out per instance.
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise ValueError("holdout_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train: dict[str, list[int]] = {}
    holdout: dict[str, list[int]] = {}
    for inst in dataset.instances:
        n = len(inst.views)
        n_hold = max(1, int(round(holdout_fraction * n)))
        if n_hold >= n:
            raise ValueError(
                f"instance {inst.instance_id!r} has too few views to split"
            )
        picks = rng.choice(n, size=n_hold, replace=False)
        hold = sorted(int(i) for i in picks)
        holdout[inst.instance_id] = hold
        train[inst.instance_id] = [i for i in range(n) if i not in set(hold)]
    return train, holdout


def restrict_views(dataset: Dataset, instance_id: str, view_indices) -> Dataset:
    """Single-instance dataset keeping only the requested views."""
    inst = dataset.instance(instance_id)
    views = [inst.views[i] for i in view_indices]
    restricted = DatasetInstance(
        instance_id=inst.instance_id,
        proxies=inst.proxies,
        views=views,
        spec=inst.spec,
        analytic_proxies=inst.analytic_proxies,
        seed=inst.seed,
    )
    return Dataset(
        intrinsics=dataset.intrinsics,
        proxy_roles=list(dataset.proxy_roles),
        instances=[restricted],
        pose_ranges=dict(dataset.pose_ranges),
        root=dataset.root,
    )


def _intrinsics_to_dict(intr: CameraIntrinsics) -> dict:
    return {
        "focal_x": intr.focal_x, "focal_y": intr.focal_y,
        "principal_x": intr.principal_x, "principal_y": intr.principal_y,
        "width": intr.width, "height": intr.height,
        "near": intr.near, "far": intr.far,
    }


def _intrinsics_from_dict(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(**d)


def _mesh_to_arrays(mesh: ProxyMesh) -> dict:
    return {"vertices": mesh.vertices, "triangles": mesh.triangles, "uvs": mesh.uvs}


def mesh_from_arrays(d: dict) -> ProxyMesh:
    return ProxyMesh(vertices=d["vertices"], triangles=d["triangles"], uvs=d["uvs"])


def dataset_metadata(dataset: Dataset) -> dict:
    """Camera + proxy metadata embedded in checkpoints so rendering and
    serving need no dataset directory."""
    return {
        "intrinsics": _intrinsics_to_dict(dataset.intrinsics),
        "proxy_roles": list(dataset.proxy_roles),
        "pose_ranges": dict(dataset.pose_ranges),
        "proxies": {
            inst.instance_id: {
                role: _mesh_to_arrays(mesh) for role, mesh in inst.proxies.items()
            }
            for inst in dataset.instances
        },
    }


def proxies_from_metadata(meta: dict, instance_id: str) -> list[ProxyMesh]:
    if instance_id not in meta["proxies"]:
        raise KeyError(f"unknown instance {instance_id!r}")
    per_role = meta["proxies"][instance_id]
    return [mesh_from_arrays(per_role[r]) for r in meta["proxy_roles"]]


def write_manifest(dataset: Dataset, root: Path,
                   relative_paths: dict) -> None:
    """Serialize the manifest; ``relative_paths`` maps (instance_id, kind,
    key) to file paths relative to root."""
    instances = []
    for inst in dataset.instances:
        views = []
        for v_idx, view in enumerate(inst.views):
            views.append({
                "image": relative_paths[(inst.instance_id, "view", v_idx)],
                "yaw_deg": view.yaw_deg,
                "pitch_deg": view.pitch_deg,
                "distance": view.distance,
                "rotation": view.pose.rotation.reshape(-1).tolist(),
                "translation": view.pose.translation.tolist(),
            })
        entry = {
            "id": inst.instance_id,
            "seed": inst.seed,
            "spec": inst.spec.to_dict() if inst.spec is not None else None,
            "proxies": {
                role: relative_paths[(inst.instance_id, "proxy", role)]
                for role in dataset.proxy_roles
            },
            "views": views,
        }
        if inst.analytic_proxies is not None:
            entry["analytic_proxies"] = {
                role: relative_paths[(inst.instance_id, "analytic", role)]
                for role in dataset.proxy_roles
            }
        instances.append(entry)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "intrinsics": _intrinsics_to_dict(dataset.intrinsics),
        "proxy_roles": list(dataset.proxy_roles),
        "pose_ranges": dict(dataset.pose_ranges),
        "instances": instances,
    }
    with open(root / MANIFEST_NAME, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise DatasetSchemaError(f"{where}: missing required key {key!r}")
    return d[key]


def load_dataset(root) -> Dataset:
    """Load and validate an on-disk dataset.

    Proxy meshes load eagerly (they are tiny); images remain on disk and
    load on demand, converting to premultiplied at access via
    :meth:`ViewRecord.get_premultiplied`.
    """
    from .synth import InstanceSpec  # local import to avoid a cycle

    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetSchemaError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetSchemaError(f"{manifest_path}: invalid JSON: {exc}") from exc
    version = _require(manifest, "format_version", str(manifest_path))
    if version != MANIFEST_VERSION:
        raise DatasetSchemaError(
            f"manifest version {version} != supported {MANIFEST_VERSION}"
        )
    intr = _intrinsics_from_dict(_require(manifest, "intrinsics", "manifest"))
    proxy_roles = _require(manifest, "proxy_roles", "manifest")

    instances = []
    for entry in _require(manifest, "instances", "manifest"):
        iid = _require(entry, "id", "instance")
        roles = _require(entry, "proxies", f"instance {iid!r}")
        if sorted(roles) != sorted(proxy_roles):
            raise DatasetSchemaError(
                f"instance {iid!r}: proxy roles {sorted(roles)} do not match "
                f"dataset roles {sorted(proxy_roles)}"
            )
        proxies = {}
        for role, rel in roles.items():
            path = root / rel
            if not path.exists():
                raise DatasetSchemaError(
                    f"instance {iid!r}: missing proxy file {path}"
                )
            proxies[role] = load_proxy_obj(path)
        analytic = None
        if entry.get("analytic_proxies"):
            analytic = {}
            for role, rel in entry["analytic_proxies"].items():
                path = root / rel
                if not path.exists():
                    raise DatasetSchemaError(
                        f"instance {iid!r}: missing proxy file {path}"
                    )
                analytic[role] = load_proxy_obj(path)
        views = []
        for v_idx, v in enumerate(_require(entry, "views", f"instance {iid!r}")):
            img_rel = _require(v, "image", f"instance {iid!r} view {v_idx}")
            img_path = root / img_rel
            if not img_path.exists():
                raise DatasetSchemaError(
                    f"instance {iid!r}: missing image file {img_path}"
                )
            pose = Pose(
                rotation=np.array(v["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.array(v["translation"], dtype=np.float64),
            )
            views.append(ViewRecord(
                pose=pose,
                yaw_deg=float(v.get("yaw_deg", 0.0)),
                pitch_deg=float(v.get("pitch_deg", 0.0)),
                distance=float(v.get("distance", 0.0)),
                image_path=img_path,
            ))
        spec = InstanceSpec.from_dict(entry["spec"]) if entry.get("spec") else None
        instances.append(DatasetInstance(
            instance_id=iid,
            proxies=proxies,
            views=views,
            spec=spec,
            analytic_proxies=analytic,
            seed=entry.get("seed"),
        ))
    return Dataset(
        intrinsics=intr,
        proxy_roles=proxy_roles,
        instances=instances,
        pose_ranges=manifest.get("pose_ranges", {}),
        root=root,
    )
