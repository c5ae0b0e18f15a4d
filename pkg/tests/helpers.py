"""Random constrained states of the human-prosthesis model."""
import numpy as np
from scipy.linalg import null_space

from idclf.constraints import holonomic_set
from idclf.model import FullState, place_on_contact

SOLE = (0.0, -0.06825)
STANCE = {"ps": "p_foot", "pns": "l_foot"}


def random_constrained_state(model, rng, domain="ps", spread=0.4, speed=1.0):
    """A configuration with the stance sole flat at the origin, the fixed joint
    at rest, and a velocity consistent with the stance constraints."""
    q = np.zeros(model.eta)
    joints = model.coord_indices(["lh", "lk", "la", "rh", "pk", "pa"])
    q[joints] = rng.uniform(-spread, spread, joints.size)
    q = place_on_contact(model, q, STANCE[domain], SOLE, np.zeros(3))
    name = model.domains[domain]["constraints"]
    hs = holonomic_set(model, name).with_reference(model, q)
    N = null_space(hs.jacobian(model, q))
    qd = N @ rng.normal(scale=speed, size=N.shape[1])
    return FullState(q, qd), hs


def subsystem_stance_state(sub, pc, clock=0.2, foot=(0.0, 0.06825, 0.0), qs0=(0.1, 0.0)):
    """Prosthesis-stance subsystem state with zero output error and rate.

    The base comes from the flat-foot reconstruction, so the stance foot
    constraint holds; joint angles are iterated onto the desired outputs.
    """
    from idclf.model import SitePoint
    from idclf.sim import stance_base_ik

    site = SitePoint("p_foot")
    mp = pc.maps["ps"]
    qs = np.array(qs0, dtype=float)
    for _ in range(100):
        base, _ = stance_base_ik(sub, qs, np.zeros(2), foot, site)
        ob = mp.evaluate(np.r_[base, qs], np.zeros(5), clock)
        qs = qs - ob.y
        if np.max(np.abs(ob.y)) < 1e-14:
            break
    base, _ = stance_base_ik(sub, qs, np.zeros(2), foot, site)
    qb = np.r_[base, qs]
    cols = [np.r_[stance_base_ik(sub, qs, e, foot, site)[1], e] for e in np.eye(2)]
    T = np.stack(cols, axis=1)
    ob0 = mp.evaluate(qb, np.zeros(5), clock)
    qs_dot = np.linalg.solve(ob0.J_y @ T, -ob0.ydot)
    return qb, T @ qs_dot
