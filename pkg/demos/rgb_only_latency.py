"""Compare per-clip latency of RGB-only inference with the flow pipelines.

Run:  python demos/rgb_only_latency.py

Networks are freshly initialised: latency does not depend on the weights,
only on the work done.  The flow pipelines pay for TV-L1 on every frame
pair, which the distilled student never runs; the counters show it.
"""

from bers.bench import run_bench
from bers.net import build_student, build_teacher
from bers.synthvid import DatasetSpec, generate
from bers.train import default_net_config

data = generate(DatasetSpec(clips_per_class=3))
config = default_net_config(data)
report = run_bench(build_student(config, 0), build_teacher(config, 0), data.clips[:16], repeat=3,
                   warmup_clips=data.clips[16:18])
print(report.summary())
