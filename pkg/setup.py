"""
Setup script for strataft
Keeps the strataft package importable for plain setuptools installs
"""
from setuptools import setup, find_packages

setup(
    name="strataft",
    version="0.1.0",
    packages=find_packages(include=["strataft", "strataft.*"]),
    install_requires=[
        "pandas>=2.0.0",
        "numpy>=1.24.0",
        "scipy>=1.11.0",
        "scikit-learn>=1.3.0",
        "python-dotenv>=1.0.0",
        "pyyaml>=6.0.0",
        "jsonschema>=4.25.1",
        "tqdm>=4.66.0",
    ],
    entry_points={"console_scripts": ["strataft = strataft.cli:main"]},
    python_requires=">=3.12",
)
