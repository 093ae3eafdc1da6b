"""ed2k-trace – eDonkey server traffic toolkit.

Subcommands, one per stage:

* **generate** – synthetic workload: pcap, drop sidecar, ground truth.
* **run** – pcap → decode → anonymize → XML trace, with a run report.
* **analyze** – distributions, power-law fits, peaks and summary of a trace.
* **verify** – compare a run's artifacts with a workload's ground truth.
* **bucket-stats** – fileID bucket occupancy for chosen index bytes.

Start with::

    python -m app --help
"""

__version__ = "1.0.0"
