"""
Counting trainable parameters
=============================

Every layer reports its parameter count twice: from a closed-form formula
and by adding up the sizes of the tensors it actually holds. The audit
refuses to print if the two ever disagree.
"""
from flowvid.model import ModelSpec, Variant, audit_params, build

for variant in Variant:
    audit = audit_params(build(ModelSpec(variant, class_count=141)))
    print(variant.title)
    print(audit.table())
    print()

td = audit_params(build(ModelSpec(Variant.TD, 141))).total
vanilla = audit_params(build(ModelSpec(Variant.VANILLA, 141))).total
print(f"the time-distributed head costs {td / vanilla:.2f}x the parameters")

# Nearly all of it is the final dense layer, which sees every one of the
# 512 steps x 64 features instead of only the last LSTM state.
for classes in (2, 10, 141):
    last = audit_params(build(ModelSpec(Variant.TD, classes))).rows[-1]
    print(f"C={classes:<4} last layer {last.formula:<18} {last.count:>9,}")
