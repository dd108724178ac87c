"""Slow, independent reference implementations used to check the package.

Written as plain scalar loops against the definitions; nothing here imports
package internals beyond data containers.
"""

import math

import numpy as np


def geometry_loop(basis, alpha, delta):
    n = basis.n_vertices
    out = np.zeros((n, 3))
    for v in range(n):
        for c in range(3):
            s = basis.mean_geometry[v, c] + basis.mean_expression[v, c]
            for i in range(len(alpha)):
                s += alpha[i] * basis.sigma_id[i] * basis.geometry_components[i, v, c]
            for i in range(len(delta)):
                s += delta[i] * basis.sigma_exp[i] * basis.expression_components[i, v, c]
            out[v, c] = s
    return out


def reflectance_loop(basis, beta):
    n = basis.n_vertices
    out = np.zeros((n, 3))
    for v in range(n):
        for c in range(3):
            s = basis.mean_reflectance[v, c]
            for i in range(len(beta)):
                s += beta[i] * basis.sigma_tex[i] * basis.reflectance_components[i, v, c]
            out[v, c] = s
    return out


def cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def normals_loop(positions, triangles):
    acc = [[0.0, 0.0, 0.0] for _ in range(len(positions))]
    for a, b, c in triangles:
        pa, pb, pc = positions[a], positions[b], positions[c]
        e1 = [pb[k] - pa[k] for k in range(3)]
        e2 = [pc[k] - pa[k] for k in range(3)]
        fn = cross(e1, e2)
        for v in (a, b, c):
            for k in range(3):
                acc[v][k] += fn[k]
    out = []
    for s in acc:
        ln = math.sqrt(sum(x * x for x in s))
        out.append([0.0, 0.0, 1.0] if ln < 1e-12 else [x / ln for x in s])
    return np.array(out)


def rodrigues(omega):
    """Rotation via the matrix exponential series (independent of the closed form)."""
    k = np.array([[0.0, -omega[2], omega[1]], [omega[2], 0.0, -omega[0]], [-omega[1], omega[0], 0.0]])
    out = np.eye(3)
    term = np.eye(3)
    for j in range(1, 40):
        term = term @ k / j
        out = out + term
    return out


def project_point(p, width, height, focal):
    """Camera looks down -z: a point in front has z < 0."""
    d = -p[2]
    u = width / 2.0 + focal * p[0] / d
    v = height / 2.0 - focal * p[1] / d
    return u, v, d


def sh_loop(n):
    x, y, z = n
    return [
        0.5 * math.sqrt(1.0 / math.pi),
        math.sqrt(3.0 / (4 * math.pi)) * y,
        math.sqrt(3.0 / (4 * math.pi)) * z,
        math.sqrt(3.0 / (4 * math.pi)) * x,
        0.5 * math.sqrt(15.0 / math.pi) * x * y,
        0.5 * math.sqrt(15.0 / math.pi) * y * z,
        0.25 * math.sqrt(5.0 / math.pi) * (3 * z * z - 1),
        0.5 * math.sqrt(15.0 / math.pi) * x * z,
        0.25 * math.sqrt(15.0 / math.pi) * (x * x - y * y),
    ]


def shade_loop(reflectance, normals, rot, gamma):
    out = np.zeros_like(reflectance)
    for i in range(len(normals)):
        n = [sum(rot[r, c] * normals[i][c] for c in range(3)) for r in range(3)]
        h = sh_loop(n)
        for k in range(3):
            out[i, k] = reflectance[i, k] * sum(gamma[9 * k + j] * h[j] for j in range(9))
    return out


def bilinear_loop(image, u, v):
    """Pixel (i, j) is centered at (j + 0.5, i + 0.5); None outside."""
    x, y = u - 0.5, v - 0.5
    j0, i0 = math.floor(x), math.floor(y)
    h, w = image.shape[:2]
    if j0 < 0 or i0 < 0 or j0 + 1 >= w or i0 + 1 >= h:
        return None
    fx, fy = x - j0, y - i0
    return ((1 - fx) * (1 - fy) * image[i0, j0] + fx * (1 - fy) * image[i0, j0 + 1]
            + (1 - fx) * fy * image[i0 + 1, j0] + fx * fy * image[i0 + 1, j0 + 1])


def landmark_loss_loop(pred, target, valid):
    s, n = 0.0, 0
    for p, t, ok in zip(pred, target, valid):
        if ok:
            s += (p[0] - t[0]) ** 2 + (p[1] - t[1]) ** 2
            n += 1
    return s / n


def photometric_loop(colors, samples, used):
    s, n = 0.0, 0
    for c, x, ok in zip(colors, samples, used):
        if ok:
            s += math.sqrt(sum((c[k] - x[k]) ** 2 for k in range(3)))
            n += 1
    return s / n


def regularization_loop(alpha, beta, delta, wa, wb, wd):
    return wa * sum(a * a for a in alpha) + wb * sum(b * b for b in beta) + wd * sum(d * d for d in delta)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def rnn_loop(w_in, w_rec, b_h, w_out, b_out, x):
    hsz = len(b_h)
    h = [0.0] * hsz
    for xt in x:
        new = []
        for r in range(hsz):
            a = b_h[r]
            for c in range(len(xt)):
                a += w_in[r][c] * xt[c]
            for c in range(hsz):
                a += w_rec[r][c] * h[c]
            new.append(math.tanh(a))
        h = new
    return [sigmoid(b_out[k] + sum(w_out[k][r] * h[r] for r in range(hsz))) for k in range(len(b_out))]
