#!/usr/bin/env python3
"""
Utility functions for the LSTR detector
Small helpers shared by the command layer
"""

import json

from file_manager import FileManager


def sanitize_filename(filename):
    """
    Sanitize a name for use inside an output file name

    Args:
        filename (str): Original name (video id, split name, ...)

    Returns:
        str: Name with path separators and unsafe characters replaced
    """
    invalid_chars = '<>:"/\\|?* '
    for char in invalid_chars:
        filename = filename.replace(char, '_')
    filename = ''.join(char for char in filename if ord(char) >= 32)
    filename = filename.strip('. ')
    return filename[:200] or "unnamed"


def format_duration(seconds):
    """
    Format duration in seconds to human-readable format

    Args:
        seconds (float): Duration in seconds

    Returns:
        str: Formatted duration (e.g., "1:23:45")
    """
    if seconds is None:
        return "Unknown"
    hours = int(seconds // 3600)
    minutes = int((seconds % 3600) // 60)
    secs = int(seconds % 60)
    if hours > 0:
        return f"{hours}:{minutes:02d}:{secs:02d}"
    return f"{minutes}:{secs:02d}"


def load_json(path):
    """
    Load a JSON document

    Args:
        path (str or Path): File to read

    Returns:
        Parsed document; FileNotFoundError and json.JSONDecodeError propagate
    """
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def save_json(document, path):
    """Write a JSON document atomically with stable key order"""
    FileManager.atomic_write_text(path, json.dumps(document, indent=2) + "\n")


def parse_int_list(text):
    """'3,4,5' -> [3, 4, 5]"""
    return [int(part) for part in str(text).split(',') if part.strip()]
