"""On-disk contact datasets.

Layout::

    <root>/manifest.json
    <root>/<object>/<scenario_id>/{rest.obj, deformed.obj, rigid.obj, meta.json}

``rigid.obj`` holds the collider already moved to its contact-frame pose;
``meta.json`` records that pose separately as 16 row-major floats.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .encoding import ForceDescriptor
from .errors import InvalidArgumentError, InvariantViolationError, SchemaViolationError, UnstableScenarioError
from .mesh import TriMesh, load_mesh, save_obj
from .shapes import COLLIDERS, collider, soft_object
from .sim import ColliderSpec, ContactSample, RigidCollider, SimConfig, simulate_contact

logger = logging.getLogger(__name__)

SAMPLE_FILES = ("rest.obj", "deformed.obj", "rigid.obj", "meta.json")
META_FIELDS = ("rigid_pose", "velocity", "force_dir", "force_mag", "contact_points",
               "contact_node_indices", "stiffness", "damping", "seed")
MANIFEST_FORMAT = 1


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_sample(sample, directory, extra_meta=None):
    """Write one ContactSample; returns the directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_obj(sample.rest_mesh, d / "rest.obj")
    save_obj(sample.deformed_mesh, d / "deformed.obj")
    save_obj(sample.rigid.world_mesh(), d / "rigid.obj")
    force = sample.rigid.applied_force
    meta = {
        "rigid_pose": sample.rigid_pose.reshape(-1).tolist(),
        "velocity": sample.rigid.velocity.tolist(),
        "force_dir": np.asarray(force.direction, float).tolist(),
        "force_mag": float(force.magnitude),
        "contact_points": sample.contact_points.tolist(),
        "contact_node_indices": sample.contact_node_indices.tolist(),
        "stiffness": sample.stiffness,
        "damping": sample.damping,
        "seed": sample.scenario_seed,
        "contact_frame": sample.contact_frame,
        "stop_time": sample.rigid.stop_time,
    }
    meta.update(extra_meta or {})
    _dump_json(meta, d / "meta.json")
    return d


def meta_field(meta, name, shape=None, dtype=float):
    if name not in meta:
        raise SchemaViolationError(name, f"meta.json is missing required field {name!r}")
    try:
        value = np.asarray(meta[name], dtype=dtype)
    except (TypeError, ValueError):
        raise SchemaViolationError(name, f"field {name!r} has the wrong type") from None
    if shape is not None:
        ok = value.ndim == len(shape) and all(s is None or s == n for s, n in zip(shape, value.shape))
        # an empty list is a valid (0, 3) point array
        if not ok and not (value.size == 0 and len(shape) == 2):
            raise SchemaViolationError(name, f"field {name!r} has shape {value.shape}, expected {shape}")
        if value.size == 0 and len(shape) == 2:
            value = value.reshape(0, shape[1])
    return value


def read_meta(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing sample file: {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolationError("meta.json", f"{path}: invalid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise SchemaViolationError("meta.json", f"{path}: expected a JSON object")
    return meta


def load_sample(directory):
    """Inverse of :func:`write_sample`, with schema and invariant checks."""
    d = Path(directory)
    for name in SAMPLE_FILES:
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing sample file: {d / name}")
    meta = read_meta(d / "meta.json")
    pose = meta_field(meta, "rigid_pose", (16,))
    velocity = meta_field(meta, "velocity", (3,))
    force_dir = meta_field(meta, "force_dir", (3,))
    force_mag = float(meta_field(meta, "force_mag", ()))
    points = meta_field(meta, "contact_points", (None, 3))
    indices = meta_field(meta, "contact_node_indices", (None,), dtype=np.int64)
    stiffness = float(meta_field(meta, "stiffness", ()))
    damping = float(meta_field(meta, "damping", ()))
    seed = int(meta_field(meta, "seed", (), dtype=np.int64))
    if len(points) != len(indices):
        raise SchemaViolationError("contact_points", "contact_points and contact_node_indices differ in length")

    rest = load_mesh(d / "rest.obj")
    deformed = load_mesh(d / "deformed.obj")
    if rest.n_vertices != deformed.n_vertices or not np.array_equal(rest.faces, deformed.faces):
        raise InvariantViolationError(f"{d}: rest.obj and deformed.obj have different face lists")
    rigid = RigidCollider(
        load_mesh(d / "rigid.obj"),
        velocity=velocity,
        applied_force=ForceDescriptor(force_dir, force_mag),
        stop_time=meta.get("stop_time"),
    )
    return ContactSample(
        rest_mesh=rest,
        deformed_mesh=deformed,
        rigid=rigid,
        contact_points=points,
        contact_node_indices=indices,
        scenario_seed=seed,
        stiffness=stiffness,
        damping=damping,
        contact_frame=int(meta.get("contact_frame", -1)),
        rigid_pose=pose.reshape(4, 4),
    )


def samples_equal(a, b):
    """Bitwise equality of everything a sample stores."""
    return (
        a.rest_mesh == b.rest_mesh
        and a.deformed_mesh == b.deformed_mesh
        and a.rigid.world_mesh() == b.rigid.world_mesh()
        and np.array_equal(a.rigid.velocity, b.rigid.velocity)
        and np.array_equal(a.rigid.applied_force.as_array(), b.rigid.applied_force.as_array())
        and np.array_equal(a.rigid_pose, b.rigid_pose)
        and np.array_equal(a.contact_points, b.contact_points)
        and np.array_equal(a.contact_node_indices, b.contact_node_indices)
        and a.scenario_seed == b.scenario_seed
        and a.stiffness == b.stiffness
        and a.damping == b.damping
    )


def sample_digest(directory):
    h = hashlib.sha256()
    for name in SAMPLE_FILES:
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# generation

def scenario_seed(base_seed, object_index, scenario_index):
    """Independent 32-bit seed per (object, scenario) pair."""
    ss = np.random.SeedSequence([int(base_seed), int(object_index), int(scenario_index)])
    return int(ss.generate_state(1)[0])


def is_test_scenario(scenario_index):
    """Every fifth scenario goes to the test split (80/20)."""
    return scenario_index % 5 == 4


def _resolve_objects(objects):
    out = []
    for i, obj in enumerate(objects):
        if isinstance(obj, str):
            mesh, k, d = soft_object(obj)
            out.append((obj, mesh, k, d))
        elif isinstance(obj, TriMesh):
            out.append((f"object{i:02d}", obj, 1.0, 0.02))
        else:
            name, mesh, k, d = obj
            out.append((str(name), mesh, float(k), float(d)))
    names = [o[0] for o in out]
    if len(set(names)) != len(names):
        raise InvalidArgumentError(f"duplicate object names: {names}")
    return out


def _run_one(job):
    name, mesh, stiffness, damping, collider_name, seed, config, out_dir, sid = job
    spec = ColliderSpec(collider(collider_name), collider_name)
    try:
        sample = simulate_contact(mesh, spec, seed, config, stiffness=stiffness, damping=damping)
    except UnstableScenarioError as exc:
        return {"object": name, "scenario": sid, "seed": seed, "reason": str(exc)}
    d = write_sample(sample, Path(out_dir) / name / sid, {"collider": collider_name})
    return {"object": name, "scenario": sid, "seed": seed, "collider": collider_name,
            "contacts": int(len(sample.contact_node_indices)), "sha256": sample_digest(d)}


def generate_dataset(objects, scenarios_per_object, base_seed, out_dir, config=None,
                     colliders=COLLIDERS, workers=1):
    """Simulate every (object, scenario) pair and write the dataset plus manifest.

    ``objects`` holds soft-object names, TriMeshes, or
    ``(name, mesh, stiffness, damping)`` tuples. Scenario ``i`` uses collider
    ``colliders[i % len(colliders)]``. Unstable scenarios are listed under
    ``"skipped"`` in the manifest. Output is identical for any ``workers``.
    """
    if scenarios_per_object < 0:
        raise InvalidArgumentError("scenarios_per_object must be >= 0")
    config = config or SimConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolve_objects(objects)
    jobs = []
    for oi, (name, mesh, k, d) in enumerate(resolved):
        for si in range(scenarios_per_object):
            jobs.append((name, mesh, k, d, colliders[si % len(colliders)],
                         scenario_seed(base_seed, oi, si), config, str(out), f"{si:04d}"))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=4))
    else:
        results = [_run_one(j) for j in jobs]

    manifest = {
        "format": MANIFEST_FORMAT,
        "base_seed": int(base_seed),
        "scenarios_per_object": int(scenarios_per_object),
        "sim_config": config.as_dict(),
        "objects": {},
        "samples": {},
        "split": {"train": [], "test": []},
        "skipped": [],
    }
    for name, mesh, k, d in resolved:
        manifest["objects"][name] = {"n_vertices": mesh.n_vertices, "stiffness": k,
                                     "damping": d, "scenarios": []}
    for r in results:
        key = f"{r['object']}/{r['scenario']}"
        if "reason" in r:
            logger.warning("skipped unstable scenario %s (seed %d): %s", key, r["seed"], r["reason"])
            manifest["skipped"].append(r)
            continue
        manifest["objects"][r["object"]]["scenarios"].append(r["scenario"])
        manifest["samples"][key] = {k: r[k] for k in ("seed", "collider", "contacts", "sha256")}
        manifest["split"]["test" if is_test_scenario(int(r["scenario"])) else "train"].append(key)
    manifest["counts"] = {
        "requested": len(jobs),
        "written": len(manifest["samples"]),
        "skipped": len(manifest["skipped"]),
        "train": len(manifest["split"]["train"]),
        "test": len(manifest["split"]["test"]),
    }
    _dump_json(manifest, out / "manifest.json")
    return manifest


def load_manifest(root):
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    for key in ("objects", "samples", "split"):
        if key not in manifest:
            raise SchemaViolationError(key, f"{path} lacks {key!r}")
    return manifest


def split_keys(manifest, split, objects=None):
    if split not in manifest["split"]:
        raise InvalidArgumentError(f"unknown split {split!r}")
    keys = manifest["split"][split]
    if objects is not None:
        keys = [k for k in keys if k.split("/")[0] in set(objects)]
    return list(keys)


def verify_dataset(root, manifest=None):
    """Keys whose files no longer match their recorded sha256."""
    root = Path(root)
    manifest = manifest or load_manifest(root)
    return [k for k, rec in manifest["samples"].items() if sample_digest(root / k) != rec["sha256"]]
