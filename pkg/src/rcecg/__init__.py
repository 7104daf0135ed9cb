"""Echo state network heartbeat classification for MIT-BIH style ECG records."""

__version__ = "0.1.0"
