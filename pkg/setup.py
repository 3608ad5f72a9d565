from pathlib import Path
from setuptools import setup, find_packages

long_description = Path('README.md').read_text(encoding='utf-8')

with open('requirements.txt') as f:
    required = [line for line in f.read().splitlines() if line.strip()]

setup(
    name='sentfuse',
    version='0.1.0',
    description='Desk-scale Transformer translation with fused bi-directional self-attention language models',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='MIT',
    python_requires='>=3.8',
    packages=find_packages(include=('sentfuse', 'sentfuse.*')),
    entry_points={
        'console_scripts': [
            'sentfuse=sentfuse.cli:main',
        ],
    },
    install_requires=required,
    extras_require={
        'test': ['pytest>=7'],
    },
    include_package_data=True,
    zip_safe=False,
)
