"""
Recovering planted logit coefficients
=====================================

Simulate conditional-logit choices with known time and cost weights, then
fit the same utility skeleton by multi-start maximum likelihood.
"""

import numpy as np

from symchoice.choice import fit_candidate, group_nll, probability_matrix
from symchoice.synthetic import planted_clogit

# 2000 choices among three options; utilities are -0.05*time - 0.10*cost
data, utility, beta = planted_clogit(n=2000, seed=0)
print(utility.rendered())

fitted = fit_candidate(utility, data)
print("true  ", beta)
print("fitted", fitted.theta)
print("relative error", np.abs(fitted.theta - beta) / np.abs(beta))

# the fit can only improve on the generating parameters
print("NLL fitted %.3f vs generator %.3f" % (fitted.nll, group_nll(utility, data, beta)))

# in-sample choice shares against predicted shares
shares = data.class_counts() / len(data)
print("observed shares ", shares.round(3))
print("predicted shares", probability_matrix(fitted, data).mean(axis=0).round(3))
