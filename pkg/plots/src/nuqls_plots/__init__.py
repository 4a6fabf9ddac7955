"""Figure scripts over the versioned experiment-report schema."""

from .figures import PlotJob, load_report, plot_band, plot_sev, plot_violin

__version__ = "0.1.0"
