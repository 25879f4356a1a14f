"""PV bridge: upstream data source, protocol gateway, reference IOC, batch
archiver and a two-arm test bench, all speaking the PVWire protocol."""

__version__ = "0.1.0"
