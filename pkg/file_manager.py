#!/usr/bin/env python3
"""
File Manager Module
Atomic output writes and run-directory housekeeping
"""

import os
import tempfile
from pathlib import Path


class FileManager:
    """File operations shared by every command; all outputs go through atomic writes"""

    @staticmethod
    def atomic_write_bytes(file_path, data: bytes):
        """Write data to a sibling temp file, then rename it over file_path

        Args:
            file_path: Destination path
            data: Bytes to write

        Returns:
            Path object of the written file
        """
        target = Path(file_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp_name, target)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        return target

    @staticmethod
    def atomic_write_text(file_path, text: str):
        """UTF-8 variant of atomic_write_bytes"""
        return FileManager.atomic_write_bytes(file_path, text.encode("utf-8"))

    @staticmethod
    def get_file_size(file_path):
        """Get human-readable file size

        Args:
            file_path: Path to file

        Returns:
            Formatted size string
        """
        try:
            size = Path(file_path).stat().st_size
        except OSError:
            return "Unknown"
        if size >= 1024 * 1024:
            return f"{size / (1024 * 1024):.2f} MB"
        if size >= 1024:
            return f"{size / 1024:.2f} KB"
        return f"{size} B"

    @staticmethod
    def ensure_directory(directory):
        """Ensure directory exists, create if it doesn't

        Args:
            directory: Directory path

        Returns:
            Path object
        """
        dir_path = Path(directory)
        dir_path.mkdir(parents=True, exist_ok=True)
        return dir_path

    @staticmethod
    def require_file(file_path, what: str = "file"):
        """Path of an existing file, or FileNotFoundError naming what is missing"""
        path = Path(file_path)
        if not path.is_file():
            raise FileNotFoundError(f"{what} not found: {path}")
        return path
