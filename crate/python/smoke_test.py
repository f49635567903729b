"""Quick end-to-end check of the aet extension module.

Build and install it first:  pip install --no-build-isolation ./crates/py
"""

import math

import aet


def main():
    mesh = aet.Mesh.disk(0.5, 1 / 16)
    assert (mesh.node_count, mesh.triangle_count) == (631, 1176), mesh
    print(mesh)

    sigma = aet.phantom(mesh)
    assert len(sigma) == mesh.node_count
    assert set(round(v, 6) for v in sigma) <= {1.0, 1.8, 2.5, 3.0}

    h = aet.power_densities(mesh, sigma)
    assert len(h) == 4 and all(len(hi) == mesh.triangle_count for hi in h)
    assert min(min(hi) for hi in h) >= 0.0

    # the homogeneous disk has H = 1/4 for every unit linear current
    flat = aet.power_densities(mesh, [1.0] * mesh.node_count)
    assert max(abs(v - 0.25) for v in flat[0]) < 0.05

    xi = [2.5 * math.sin(7 * x) for x, _ in mesh.nodes]
    p = aet.prox(mesh, xi, "l1", 1.0)
    assert all(abs(a - math.copysign(max(abs(b) - 1.0, 0.0), b)) < 1e-12 for a, b in zip(p, xi))

    m = aet.metrics(mesh, sigma, sigma)
    assert m["e_l1"] == 0.0

    rec = aet.reconstruct(mesh, h, [1e-3] * 4, penalty="l1", m=100.0, max_sweeps=200, truth=sigma)
    assert len(rec["sigma"]) == mesh.node_count
    err = aet.metrics(mesh, rec["sigma"], sigma)
    print(f"reconstruction: n_delta={rec['n_delta']} converged={rec['converged']} e_L1={err['e_l1']:.4f}")
    assert err["e_l1"] < aet.metrics(mesh, [1.0] * mesh.node_count, sigma)["e_l1"]

    summary = aet.run(
        "output_dir = \"smoke_out\"\nnoise_levels = [0.08]\n[mesh]\nh_coarse = 0.125\nh_fine = 0.125\n[algorithm]\nmax_sweeps = 300\n"
    )
    run = summary["runs"][0]
    print(f"experiment: n_delta={run['n_delta']} e_L1={run['e_l1']:.4f}")

    try:
        aet.Mesh.disk(0.5, -1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative mesh size accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
