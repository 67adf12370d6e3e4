#!/usr/bin/env python3
"""
Setup script for the LSTR Action Detector
Installs the package as a CLI tool that can be run with a single command
"""

from setuptools import setup
from pathlib import Path

# Read the long description from README
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text(encoding='utf-8')

# Read requirements
requirements = []
with open('requirements.txt', 'r') as f:
    requirements = [line.split('#')[0].strip() for line in f
                    if line.strip() and not line.startswith('#')]

setup(
    name='lstr-detector',
    version='1.0.0',
    description='Spatio-temporal action detection with short- and long-term tubelet relations',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='MIT',
    py_modules=[
        'lstr_detector',
        'cli_args',
        'run_config',
        'errors',
        'logger',
        'utils',
        'ui_components',
        'file_manager',
        'numerics',
        'tubelet_geometry',
        'tpn',
        'short_term_relation',
        'long_term_relation',
        'linking_eval',
        'data_synth',
        'checkpoint',
        'lstr_model',
        'trainer',
        'detector',
        'experiments',
    ],
    install_requires=requirements,
    entry_points={
        'console_scripts': [
            'lstr=lstr_detector:main',
        ],
    },
    python_requires='>=3.9',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'Topic :: Scientific/Engineering :: Image Recognition',
    ],
    keywords='action detection tubelet relation graph video',
)
