"""Desk-scale parallel I/O middleware.

Clients hold logical strided views of files and issue requests to a set
of cooperating storage servers that decluster file data across disk
directories, fragment and route requests, and move bytes in
buffer-managed chunks.  ``file_model`` holds the formal record-file
oracle every byte path is checked against.
"""

__version__ = "0.1.0"
