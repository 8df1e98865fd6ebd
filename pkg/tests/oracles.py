"""Independent closed-form references used by several test modules."""
import numpy as np

from viewfuse.synth import Box, Cylinder, Sphere

EPS = 1e-9


def ray_sphere(o, d, s: Sphere):
    # geometric form: closest approach of the ray to the centre
    c = np.asarray(s.center, float)
    dn = d / np.linalg.norm(d)
    tc = np.dot(c - o, dn)
    h2 = s.radius ** 2 - (np.dot(c - o, c - o) - tc * tc)
    if h2 < 0:
        return np.inf
    h = np.sqrt(h2)
    for t in (tc - h, tc + h):
        if t / np.linalg.norm(d) > EPS:
            return t / np.linalg.norm(d)
    return np.inf


def ray_box(o, d, b: Box):
    # test all six faces as bounded planes
    lo, hi = np.asarray(b.lo, float), np.asarray(b.hi, float)
    best = np.inf
    for ax in range(3):
        if d[ax] == 0:
            continue
        for plane in (lo[ax], hi[ax]):
            t = (plane - o[ax]) / d[ax]
            if not t > EPS or t >= best:
                continue
            p = o + t * d
            others = [i for i in range(3) if i != ax]
            if all(lo[i] - 1e-12 <= p[i] <= hi[i] + 1e-12 for i in others):
                best = t
    return best


def ray_cylinder(o, d, c: Cylinder):
    cx, cy = c.center_xy
    best = np.inf
    a = d[0] ** 2 + d[1] ** 2
    if a > 0:
        # parametrize by the xy closest-approach point
        px, py = o[0] - cx, o[1] - cy
        tm = -(px * d[0] + py * d[1]) / a
        m2 = (px + tm * d[0]) ** 2 + (py + tm * d[1]) ** 2
        if m2 <= c.radius ** 2:
            half = np.sqrt((c.radius ** 2 - m2) / a)
            for t in (tm - half, tm + half):
                z = o[2] + t * d[2]
                if t > EPS and c.z0 <= z <= c.z1 and t < best:
                    best = t
    if d[2] != 0:
        for zc in (c.z0, c.z1):
            t = (zc - o[2]) / d[2]
            p = o + t * d
            if t > EPS and (p[0] - cx) ** 2 + (p[1] - cy) ** 2 <= c.radius ** 2 and t < best:
                best = t
    return best


def ray_shape(o, d, shape):
    if isinstance(shape, Sphere):
        return ray_sphere(o, d, shape)
    if isinstance(shape, Box):
        return ray_box(o, d, shape)
    return ray_cylinder(o, d, shape)


def closest_hit(o, d, objects):
    ts = [ray_shape(o, d, ob.shape) for ob in objects]
    i = int(np.argmin(ts))
    return (ts[i], i) if np.isfinite(ts[i]) else (np.inf, -1)


def signed_distance(p, shape):
    if isinstance(shape, Sphere):
        return np.linalg.norm(p - np.asarray(shape.center)) - shape.radius
    if isinstance(shape, Box):
        lo, hi = np.asarray(shape.lo), np.asarray(shape.hi)
        q = np.abs(p - (lo + hi) / 2) - (hi - lo) / 2
        return np.linalg.norm(np.maximum(q, 0)) + min(q.max(), 0.0)
    cx, cy = shape.center_xy
    r = np.hypot(p[0] - cx, p[1] - cy) - shape.radius
    h = abs(p[2] - (shape.z0 + shape.z1) / 2) - (shape.z1 - shape.z0) / 2
    return np.hypot(max(r, 0), max(h, 0)) + min(max(r, h), 0.0)


def greedy_oracle(sets, frame_ids, target, m):
    """Per step, exhaustively score every unused frame; ties to the lowest id."""
    left = set(target)
    unused = list(range(len(sets)))
    chosen = []
    for _ in range(m):
        best = None
        for i in unused:
            gain = len(set(sets[i]) & left)
            key = (gain, -frame_ids[i])
            if best is None or key > best[0]:
                best = (key, i)
        i = best[1]
        unused.remove(i)
        left -= set(sets[i])
        chosen.append(frame_ids[i])
    return chosen
