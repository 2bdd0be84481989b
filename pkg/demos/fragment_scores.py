"""
Fragment importance by hand
===========================

Two groups, each with a ranked list of fitted utilities and their held-out
accuracies.  A fragment earns the accuracy of every top utility that
contains it; scores are then divided by the largest one.
"""

from symchoice.analysis import fragment_scores
from symchoice.choice import CandidateUtility

alts = ("Unvaccinated", "Vaccinated_no_booster", "Booster")


def utility(*exprs):
    return CandidateUtility.from_strings(dict(zip(alts, exprs)))


per_group = {
    "18_38": [
        (utility("C_1*covid_threat", "K_1*(sqrt(age)*(trust_government + trust_science))", "K_2*log(age + C_2)"), 0.71),
        (utility("C_1*covid_threat", "K_1*vaccine_safe_to_me", "K_2*log(age + C_2)"), 0.64),
    ],
    "39_plus": [
        (utility("C_1", "K_1*(sqrt(age)*(trust_government + trust_science))", "K_2*nurse"), 0.68),
    ],
}

table = fragment_scores(per_group, k=3)
for row in table.rows()[:6]:
    print("%-55s raw %.2f  normalized %.3f" % (row["fragment"], row["raw"], row["normalized"]))
