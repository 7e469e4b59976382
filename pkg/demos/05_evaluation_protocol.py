"""The evaluation protocol on the desk task for one seed.

Compares the pretrained network alone, DOC fine-tuning and fine-tuning with
the compactness term switched off.  The acceptance suite runs the same
protocol over five seeds.

Run:  python demos/05_evaluation_protocol.py   (about half a minute)
"""

from doclearn import desk
from doclearn.evaluation import ProtocolReport, run_class

data, reference = desk.task()
cfg = desk.protocol()
results = run_class(data, reference, desk.TARGET, cfg, seed=0)
report = ProtocolReport(results, cfg.echo(), "seeds")
print(report.table())
