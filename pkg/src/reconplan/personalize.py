"""End-to-end template-to-patient personalization on a case bundle directory.

The bundle holds template and patient geometry (ASCII OBJ/PLY), named
landmarks, and optional muscle/ligament/SCS tables:

    template_mandible.obj|ply   patient_mandible.obj|ply    (required)
    template_maxilla.*          patient_maxilla.*           (optional)
    template_condyle.*  patient_condyle.*                   (optional, TMJ)
    template_fossa.*    patient_fossa.*                     (optional, TMJ)
    template_disc.*     template_capsule.*                  (optional, TMJ)
    landmarks.csv   name,parent,x,y,z       parent in {mandible, maxilla, hyoid}
    muscles.csv     muscle,group,origin,insertion           (landmark names)
    ligaments.csv   name,group,origin,insertion             (group stm|sphm)
    scs.csv         group,scs_cm2

Pipeline: rigid initialization on the maxilla when present (the mandible
otherwise), propagation to all template geometry, per-anatomy nonrigid
registration, normalized landmark transfer with projection to the closest
patient surface vertex, muscle/ligament parameter updates from the
transferred attachment distances (straight-line paths), PCSA and force
estimation from the SCS table, a mandible-derived similarity fallback for
hyoid landmarks, and proximity-blended joint deformation for the disc
(decay 0.5) and capsule (decay 1.0). Output is a JSON-serializable
parameter dictionary.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .anatomy import ligament_rest, max_force, pcsa_estimate, update_muscle
from .geometry import TriMesh, project_to_surface
from .meshio import read_mesh, write_mesh
from .registration import (
    RegistrationError,
    apply_field,
    cpd_register,
    rigid_init,
    similarity_fit,
    tmj_blend,
    transfer_landmark,
)

__all__ = ["PersonalizeError", "build_patient_parameters", "TMJ_BLEND_CONFIG"]

TMJ_BLEND_CONFIG = {"k_nn": 20, "eps": 1e-8, "q_disc": 0.5, "q_capsule": 1.0}


class PersonalizeError(ValueError):
    pass


def _find_mesh(bundle: Path, stem: str) -> TriMesh | None:
    for suffix in (".obj", ".ply"):
        p = bundle / f"{stem}{suffix}"
        if p.exists():
            return read_mesh(p)
    return None


def _require_mesh(bundle: Path, stem: str) -> TriMesh:
    mesh = _find_mesh(bundle, stem)
    if mesh is None:
        raise PersonalizeError(f"bundle is missing {stem}.obj/.ply")
    return mesh


def _read_table(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_patient_parameters(
    bundle_dir,
    cpd_beta: float | None = None,
    cpd_lambda: float = 2.0,
    w_outlier: float = 0.1,
    max_iters: int = 150,
    write_tmj_meshes: bool = True,
) -> dict:
    bundle = Path(bundle_dir)
    if not bundle.is_dir():
        raise PersonalizeError(f"bundle directory not found: {bundle}")

    template_mand = _require_mesh(bundle, "template_mandible")
    patient_mand = _require_mesh(bundle, "patient_mandible")
    template_max = _find_mesh(bundle, "template_maxilla")
    patient_max = _find_mesh(bundle, "patient_maxilla")

    # Rigid initialization prefers the intact maxilla; the surgically altered
    # mandible is only used when no maxilla is available.
    if template_max is not None and patient_max is not None:
        rigid = rigid_init(template_max.vertices, patient_max.vertices)
    else:
        rigid = rigid_init(template_mand.vertices, patient_mand.vertices)

    fields = {
        "mandible": cpd_register(
            rigid.apply(template_mand.vertices),
            patient_mand.vertices,
            beta=cpd_beta,
            lam=cpd_lambda,
            w_outlier=w_outlier,
            max_iters=max_iters,
        )
    }
    surfaces = {"mandible": patient_mand}
    if template_max is not None and patient_max is not None:
        fields["maxilla"] = cpd_register(
            rigid.apply(template_max.vertices),
            patient_max.vertices,
            beta=cpd_beta,
            lam=cpd_lambda,
            w_outlier=w_outlier,
            max_iters=max_iters,
        )
        surfaces["maxilla"] = patient_max

    landmarks = {}
    hyoid_pending = []
    mand_pairs = []  # (template position after rigid, transferred) for the hyoid fallback
    for row in _read_table(bundle / "landmarks.csv"):
        name, parent = row["name"], row["parent"].lower()
        p0 = np.array([float(row["x"]), float(row["y"]), float(row["z"])])
        p_rigid = rigid.apply(p0[None, :])[0]
        if parent == "hyoid":
            hyoid_pending.append((name, p_rigid))
            continue
        if parent not in fields:
            raise PersonalizeError(f"landmark {name!r} references missing anatomy {parent!r}")
        transferred = transfer_landmark(p_rigid, fields[parent])
        snapped = surfaces[parent].vertices[project_to_surface(transferred, surfaces[parent])]
        landmarks[name] = {"parent": parent, "position": snapped.tolist()}
        if parent == "mandible":
            mand_pairs.append((p_rigid, snapped))

    if hyoid_pending:
        if len(mand_pairs) < 3:
            raise PersonalizeError(
                "hyoid fallback needs at least 3 mandible landmarks for the similarity fit"
            )
        src = np.array([a for a, _ in mand_pairs])
        dst = np.array([b for _, b in mand_pairs])
        try:
            scale, rot, trans = similarity_fit(src, dst)
        except RegistrationError as exc:
            raise PersonalizeError(f"hyoid similarity fallback failed: {exc}") from exc
        for name, p_rigid in hyoid_pending:
            moved = scale * rot @ p_rigid + trans
            landmarks[name] = {"parent": "hyoid", "position": moved.tolist()}

    def _landmark(name: str) -> np.ndarray:
        if name not in landmarks:
            raise PersonalizeError(f"table references unknown landmark {name!r}")
        return np.array(landmarks[name]["position"])

    muscles = {}
    for row in _read_table(bundle / "muscles.csv"):
        length = float(np.linalg.norm(_landmark(row["origin"]) - _landmark(row["insertion"])))
        l_opt, l_max = update_muscle(length, row["muscle"])
        muscles[row["muscle"].upper()] = {
            "group": row["group"].lower(),
            "length_mm": length,
            "l_opt_mm": l_opt,
            "l_max_mm": l_max,
        }

    pcsa = {}
    forces = {}
    for row in _read_table(bundle / "scs.csv"):
        group = row["group"].lower()
        est = pcsa_estimate(float(row["scs_cm2"]), group)
        pcsa[group] = {"wpcs": est.wpcs, "bpcs": est.bpcs, "mean": est.mean}
        forces[group] = max_force(est.mean, group)

    ligaments = {}
    for row in _read_table(bundle / "ligaments.csv"):
        length = float(np.linalg.norm(_landmark(row["origin"]) - _landmark(row["insertion"])))
        ligaments[row["name"]] = {
            "group": row["group"].lower(),
            "length_mm": length,
            "rest_length_mm": ligament_rest(length, row["group"]),
        }

    tmj = None
    t_cond = _find_mesh(bundle, "template_condyle")
    p_cond = _find_mesh(bundle, "patient_condyle")
    t_fossa = _find_mesh(bundle, "template_fossa")
    p_fossa = _find_mesh(bundle, "patient_fossa")
    if all(m is not None for m in (t_cond, p_cond, t_fossa, p_fossa)):
        cond_template = rigid.apply(t_cond.vertices)
        fossa_template = rigid.apply(t_fossa.vertices)
        field_cond = cpd_register(cond_template, p_cond.vertices, beta=cpd_beta,
                                  lam=cpd_lambda, w_outlier=w_outlier, max_iters=max_iters)
        field_fossa = cpd_register(fossa_template, p_fossa.vertices, beta=cpd_beta,
                                   lam=cpd_lambda, w_outlier=w_outlier, max_iters=max_iters)
        tmj = {"config": dict(TMJ_BLEND_CONFIG), "converged": field_cond.converged and field_fossa.converged}
        for stem, q in (("template_disc", TMJ_BLEND_CONFIG["q_disc"]),
                        ("template_capsule", TMJ_BLEND_CONFIG["q_capsule"])):
            mesh = _find_mesh(bundle, stem)
            if mesh is None:
                continue
            verts = rigid.apply(mesh.vertices)
            blended = np.array(
                [
                    tmj_blend(v, field_cond, field_fossa, cond_template, fossa_template,
                              q=q, eps=TMJ_BLEND_CONFIG["eps"], k_nn=TMJ_BLEND_CONFIG["k_nn"])
                    for v in verts
                ]
            )
            out_name = stem.replace("template_", "patient_") + ".obj"
            if write_tmj_meshes:
                write_mesh(bundle / out_name, TriMesh(blended, mesh.faces))
            tmj[stem.replace("template_", "")] = {"mesh": out_name, "n_vertices": len(blended)}

    mand_disp = apply_field(fields["mandible"], fields["mandible"].control_points)
    return {
        "rigid_transform": {
            "rotation": rigid.rotation.tolist(),
            "translation": rigid.translation.tolist(),
        },
        "registration": {
            name: {
                "converged": f.converged,
                "sigma2": f.sigma2,
                "n_control_points": len(f.control_points),
                "beta": f.beta,
            }
            for name, f in fields.items()
        },
        "mean_mandible_displacement_mm": float(
            np.mean(np.linalg.norm(mand_disp - fields["mandible"].control_points, axis=1))
        ),
        "landmarks": landmarks,
        "muscles": muscles,
        "pcsa": pcsa,
        "max_forces_n": forces,
        "ligaments": ligaments,
        "tmj": tmj,
    }
