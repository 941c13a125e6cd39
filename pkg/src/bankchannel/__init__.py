"""Simulator and codec for a cross-network DRAM-bank covert timing channel over RDMA."""
__version__ = "0.1.0"
