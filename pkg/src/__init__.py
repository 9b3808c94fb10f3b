"""Multi-task virtual flow meter lab"""

__version__ = "0.1.0"
