# cython: language_level=3
"""Compiled waypoint kernels.

Mirror of ``_kernels_py``: every arithmetic expression is written in the same
order so that both backends produce bit-identical results.
"""
from libc.math cimport sqrt

cdef enum:
    IN_PROGRESS = 0
    GOAL_REACHED = 1
    COLLISION = 2
    FORBIDDEN_ZONE = 3
    STEP_BUDGET = 4


cdef inline double _max3(double a, double b, double c) nogil:
    cdef double m = a
    if b > m:
        m = b
    if c > m:
        m = c
    return m


cdef inline double _rect_distance(double x, double z, double xo, double wo, double ho) nogil:
    cdef double dx = _max3(xo - x, 0.0, x - (xo + wo))
    cdef double dz = _max3(0.0 - z, 0.0, z - ho)
    return sqrt(dx * dx + dz * dz)


def rect_distance(double x, double z, double xo, double wo, double ho):
    return _rect_distance(x, z, xo, wo, ho)


def trace_motion(
    double x0, double z0, double tx, double tz, Py_ssize_t n_points,
    double xo, double wo, double ho,
    bint forbidden, double forbidden_height,
    double gx, double gz, double goal_eps,
    long max_steps, long steps_so_far,
    double w_g, double w_c, double d_safe,
    double[:, ::1] out,
):
    cdef Py_ssize_t j = 0
    cdef int code = IN_PROGRESS
    cdef double t, x, z, gdx, gdz, dg, d, v, r_g, r_c
    cdef double reward = 0.0
    cdef double x_hi = xo + wo
    cdef double dx = tx - x0
    cdef double dz = tz - z0
    cdef long steps
    with nogil:
        while j < n_points:
            j += 1
            t = <double>j / <double>n_points
            x = x0 + t * dx
            z = z0 + t * dz
            steps = steps_so_far + j
            gdx = x - gx
            gdz = z - gz
            dg = sqrt(gdx * gdx + gdz * gdz)
            r_g = -dg
            d = _rect_distance(x, z, xo, wo, ho)
            v = 1.0 - d / d_safe
            if v < 0.0:
                v = 0.0
            r_c = -v
            reward = reward + (w_g * r_g + w_c * r_c)
            out[j - 1, 0] = x
            out[j - 1, 1] = z
            out[j - 1, 2] = r_g
            out[j - 1, 3] = r_c
            if xo <= x and x <= x_hi and 0.0 <= z and z <= ho:
                code = COLLISION
                break
            if forbidden and xo <= x and x <= x_hi and ho < z and z <= ho + forbidden_height:
                code = FORBIDDEN_ZONE
                break
            if dg <= goal_eps:
                code = GOAL_REACHED
                break
            if steps >= max_steps:
                code = STEP_BUDGET
                break
    return code, j, reward
