"""Smoke test for the ratekit Python bindings.

Build first with `pip install --no-build-isolation -e crates/python`.
"""

import math

import ratekit


def toy_panel():
    rows = []
    for i, counts in enumerate([[0, 1, 0, 2], [3, 4, 2, 5], [1, 0, 1, 1], [0, 0, 1, 0], [2, 3, 1, 2]]):
        for t, n in enumerate(counts):
            rows.append((f"p{i}", t + 1, n, [1.0]))
    return ratekit.ClaimPanel.from_rows(["intercept"], rows)


def main():
    panel = toy_panel()
    assert len(panel) == 5 and panel.n_cells == 20
    assert ratekit.ClaimPanel.from_csv(panel.to_csv()).counts == panel.counts

    nb = ratekit.NbParams(2.0, 0.5)
    assert abs(nb.variance - 4.0) < 1e-12
    assert abs(sum(nb.pmf(n) for n in range(200)) - 1.0) < 1e-10

    pois = ratekit.fit_poisson_glm(panel)
    mean = sum(panel.counts) / panel.n_cells
    assert abs(pois.beta[0] - math.log(mean)) < 1e-8, pois

    negbin = ratekit.fit_nb_glm(panel)
    assert negbin.loglik >= pois.loglik - 1e-9

    fit = ratekit.fit_shared_re(panel, "negbin", "lognormal")
    assert fit.loglik >= negbin.loglik - 1e-6
    assert abs(fit.var_theta - math.expm1(fit.sigma2)) < 1e-12
    again = ratekit.ReFit.from_json(fit.to_json())
    assert again.beta == fit.beta

    report = ratekit.bm_existence_report(panel)
    assert set(report) >= {"pinquet", "nb_score", "disagreement"}, report
    assert isinstance(ratekit.pinquet_test(panel).statistic, float)

    mu, nu, a = ratekit.structural_params("nb-re", 1.0, math.log(2.0), 0.5)
    z = ratekit.buhlmann_factor(5, mu, nu, a)
    assert 0.0 < z < 1.0
    assert ratekit.buhlmann_predict(z, mu, mu) == mu

    cred = ratekit.credibility_report(panel, fit)
    assert len(cred["rows"]) == 5

    try:
        ratekit.NbParams(-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative mean accepted")

    summary = ratekit.simulate("theorem1", reps=4, seed=3, k=[30])
    assert summary["seed"] == 3 and summary["cells"], summary.keys()

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
