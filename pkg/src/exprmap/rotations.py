"""Rotation representations: 6D (two matrix columns), 3x3 matrices,
axis-angle and unit quaternions (w, x, y, z).

All functions accept a trailing-dimension batch: ``(..., 6)``, ``(..., 3, 3)``,
``(..., 3)`` or ``(..., 4)``.
"""
import numpy as np

DEGENERATE_EPS = 1e-8


class DegenerateRotationError(ValueError):
    pass


def rot6d_to_matrix(r6d):
    """Gram-Schmidt decode; the two 3-vectors become the first two columns."""
    r6d = np.asarray(r6d, dtype=np.float64)
    a1, a2 = r6d[..., 0:3], r6d[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_EPS):
        raise DegenerateRotationError("6D rotation has a zero first vector")
    b1 = a1 / n1
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(nu <= DEGENERATE_EPS * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateRotationError("6D rotation vectors are zero or parallel")
    b2 = u / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def canonical_rot6d(r6d):
    """Project an arbitrary 6D vector onto the orthonormal 6D manifold."""
    return matrix_to_rot6d(rot6d_to_matrix(r6d))


def rot6d_jacobian(r6d):
    """d vec(R) / d r6d for a single 6-vector, shape (9, 6).

    ``vec(R)`` is row-major, i.e. index ``3*row + col``.
    """
    r6d = np.asarray(r6d, dtype=np.float64)
    a1, a2 = r6d[:3], r6d[3:]
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    I = np.eye(3)
    db1_da1 = (I - np.outer(b1, b1)) / n1
    d = b1 @ a2
    u = a2 - d * b1
    nu = np.linalg.norm(u)
    b2 = u / nu
    # u = a2 - (b1.a2) b1
    du_db1 = -(np.outer(b1, a2) + d * I)
    du_da1 = du_db1 @ db1_da1
    du_da2 = I - np.outer(b1, b1)
    db2_du = (I - np.outer(b2, b2)) / nu
    db2_da1 = db2_du @ du_da1
    db2_da2 = db2_du @ du_da2
    cb1, cb2 = _skew(b1), _skew(b2)
    # b3 = b1 x b2
    db3_da1 = -cb2 @ db1_da1 + cb1 @ db2_da1
    db3_da2 = cb1 @ db2_da2

    cols = [
        np.hstack([db1_da1, np.zeros((3, 3))]),
        np.hstack([db2_da1, db2_da2]),
        np.hstack([db3_da1, db3_da2]),
    ]
    J = np.zeros((9, 6))
    for c, dcol in enumerate(cols):
        for a in range(3):
            J[3 * a + c] = dcol[a]
    return J


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def axis_angle_to_matrix(v):
    """Rodrigues' formula."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    k = v / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack(
        [
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    return np.where(small[..., None], eye, R)


def matrix_to_axis_angle(R):
    return quaternion_to_axis_angle(matrix_to_quaternion(R))


def matrix_to_quaternion(R):
    """Shepperd's method: use the formula keyed on the largest of (trace,
    diagonal entries). Branch-free selection keeps large batches fast."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    m = np.ascontiguousarray(R.reshape(-1, 9).T)
    m00, m01, m02, m10, m11, m12, m20, m21, m22 = m
    tr = m00 + m11 + m22
    choice = np.argmax(np.stack([tr, m00, m11, m22]), axis=0)
    d21, d02, d10 = m21 - m12, m02 - m20, m10 - m01
    s01, s02, s12 = m01 + m10, m02 + m20, m12 + m21
    diag = np.choose(choice, (tr, m00 - m11 - m22, m11 - m00 - m22, m22 - m00 - m11))
    s = np.sqrt(np.maximum(1.0 + diag, 0.0)) * 2.0
    big = 0.25 * s
    inv = 1.0 / s
    q = np.empty((4, m.shape[1]))
    q[0] = np.choose(choice, (big, d21 * inv, d02 * inv, d10 * inv))
    q[1] = np.choose(choice, (d21 * inv, big, s01 * inv, s02 * inv))
    q[2] = np.choose(choice, (d02 * inv, s01 * inv, big, s12 * inv))
    q[3] = np.choose(choice, (d10 * inv, s02 * inv, s12 * inv, big))
    # canonical hemisphere w >= 0
    q *= np.where(q[0] < 0, -1.0, 1.0)
    q /= np.sqrt(np.sum(q * q, axis=0))
    return q.T.reshape(batch + (4,))


def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def quaternion_multiply(a, b):
    """Hamilton product a*b (apply b first, then a)."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quaternion_conjugate(q):
    q = np.asarray(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def normalize_quaternion(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_axis_angle(q):
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0, -q, q)
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    # first-order expansion 2*xyz/w near identity
    scale = np.where(small, 2.0 / np.maximum(q[..., :1], 1e-12), angle / np.where(small, 1.0, s))
    return xyz * scale


def random_rotations(rng, n):
    """Uniformly distributed rotation matrices (via normalized Gaussian quaternions)."""
    q = rng.standard_normal((n, 4))
    return quaternion_to_matrix(normalize_quaternion(q))
