"""tallysim: a desk-scale model of block-level GPU sharing.

Layers:

* :mod:`tallysim.ir` — a mini SIMT kernel IR with a textual format and a
  deterministic interpreter (the correctness oracle).
* :mod:`tallysim.transforms` — block-offset slicing, unified
  synchronization, and the persistent-worker preemption rewrite.
* :mod:`tallysim.sim` — a deterministic discrete-event model of one GPU
  with block slots, two priority streams, and preemptible worker launches.
* :mod:`tallysim.profiler` — candidate launch configurations, isolated
  measurement, turnaround estimation, and threshold-based selection.
* :mod:`tallysim.scheduler` — the priority-aware policy plus Eager,
  KernelPriority, and TimeSliced baselines.
* :mod:`tallysim.workloads` — traffic generation, workload specs, and
  latency/throughput metrics.
* :mod:`tallysim.cli` — the ``tallysim`` command-line tool.
"""

__version__ = "0.1.0"
