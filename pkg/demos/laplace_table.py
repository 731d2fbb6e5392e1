"""Mean score MSE of Gaussian KDE on a 2-D sample with i.i.d. Laplace
marginals, ten seeds per size. The bare Silverman factor (n(d+2)/4)^(-1/(d+4)) is applied
without multiplying by the sample spread; the spread-scaled rule is shown
alongside for comparison."""

from densformer.evaluation import laplace_table

tables = {rule: laplace_table(rule=rule) for rule in ("silverman-factor", "silverman")}
print("     n  bare factor  spread-scaled")
for n in tables["silverman"]:
    print(f"{n:6d}  {tables['silverman-factor'][n]:11.4f}  {tables['silverman'][n]:13.4f}")
