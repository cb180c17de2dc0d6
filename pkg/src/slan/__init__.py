"""slan: switch-scheduled recurrent networks for irregularly sampled series.

The model consumes each instance's raw observation events directly: at every
distinct timestamp only the blocks of the sensors actually measured run one
recurrent step, every block reads a shared summary state, and the summary is
re-aggregated from the blocks that just fired.  No imputation, no padding.
"""

__version__ = "0.1.0"
