"""Setup script for trafficlm."""

from setuptools import setup, find_packages

setup(
    name="trafficlm",
    version="0.1.0",
    description="Generative pre-trained language model for network traffic flows",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.8",
    install_requires=[
        "torch>=2.0",
        "numpy>=1.22",
        "scipy>=1.8",
        "dpkt>=1.9.8",
        "scikit-learn>=1.1",
    ],
    entry_points={
        "console_scripts": [
            "trafficlm=trafficlm.main:main",
        ],
    },
)
