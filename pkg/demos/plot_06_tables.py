"""
Accuracy tables from counts
===========================

Rebuild the reference comparison and field tables from their image counts.
Accuracy is true predictions over images, rounded half up to one decimal.
"""
from structdamage.evaluation import accuracy, build_report, comparison_report, field_report, percent

# %%
# Exact fractions avoid binary rounding surprises: 0.0625 rounds to 6.3%.
print(percent(accuracy(1, 16)))

# %%
# The crack comparison: segmenter alone, classifier-gated cascade and
# detector, by scene level.  Cells that do not follow from the counts are
# listed under the table.
report = comparison_report()
print(report.render_text())

# %%
# Field images grouped by source, with a pooled average row.
print(field_report().render_text())

# %%
# Any counts can be tabulated the same way.
print(build_report([("site A", 40, 31), ("site B", 25, 20)], "average", "Custom").render_csv())
