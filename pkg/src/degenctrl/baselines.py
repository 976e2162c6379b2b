"""Frozen first-run regression baselines.

These numbers were produced by the first converged run of the matching
scenario at the configuration recorded next to each value and are never
recomputed automatically; the regression tests compare fresh runs against
them with the stated relative windows.
"""

# Carleman sup ratio (Theorem 4.3, divergence form): sup over 10 random
# vT (rng seed 7) of the LHS/RHS ratio maximized over s in geomspace
# (0.5, 2.0, 12); prototype profile, x0=0.5, N=151, T=1.0, M=160,
# weight c1=1.0, margin=0.2.  Window: 30%.
CARLEMAN_SUP_RATIO = {
    0.5: 0.007395599349,
    1.5: 0.00756907869,
}

# Penalized-HUM cost / ||u0||_W^2 for the five canonical control
# geometries: N=101, M=160, T=0.5, u0=sin(pi x), default epsilon
# (1e-6 ||u0||_W^2), CG tol 1e-8.  Window: 30%.
HUM_COST_RATIO = {
    "a_wd_div_omega_contains_x0": 0.10730776119901507,
    "b_sd_div_omega_contains_x0": 1.6078951627679503,
    "c_wd_div_one_sided": 2.1755237440506243,
    "c_wd_nondiv_one_sided": 7.904624211714224,
    "d_two_piece_straddle": 0.44480383744346474,
    "e_complete_linear_c1": 0.051608423243210494,
}
