"""
Macro metrics from a confusion matrix
=====================================

Precision, recall and F1 are computed per class and averaged without
weights, so a rare class counts as much as a common one. Balanced accuracy
is the mean per-class recall, which makes it the same number as macro
recall.
"""

import numpy as np

from hybridvfl.metrics import confusion, macro_metrics

y_true = np.array([0, 0, 0, 0, 0, 0, 1, 1, 2, 2])
y_pred = np.array([0, 0, 0, 0, 0, 1, 1, 0, 0, 0])

cm = confusion(y_true, y_pred, 3)
print(cm.counts)
rep = macro_metrics(cm)
for k, c in enumerate(rep.per_class):
    flag = "" if c.precision_defined else "  (never predicted: precision counted as 0)"
    print(f"class {k}: precision {c.precision:.2f} recall {c.recall:.2f} f1 {c.f1:.2f} support {c.support}{flag}")
print(f"accuracy {rep.accuracy:.2f}, balanced accuracy {rep.balanced_accuracy:.3f}, macro F1 {rep.macro_f1:.3f}")
