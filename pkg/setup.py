from setuptools import setup, find_packages

with open('README.md', 'r') as file_handle:
    long_description = file_handle.read()

setup(
    name='mmtoolkit',
    version='0.1.0',
    author='Daniel Lovegrove',
    author_email='d.lovegrove11@gmail.com',
    description='Multitrack music transformer: compact event codec, model, sampling and analysis',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='MIT',
    packages=find_packages(where='src'),
    package_dir={'': 'src'},
    package_data={'mmtoolkit': ['data/*.csv']},
    entry_points={
        'console_scripts': [
            'mmt=mmtoolkit.cli:main',
        ],
    },
    install_requires=[
        "numpy>=1.20",
        "torch>=1.12",
        "mido>=1.2.10",
        "matplotlib>=3.5",
        "tqdm>=4.0",
    ],
    extras_require={
        'test': [
            "pytest>=6.0",
            "beautifulsoup4>=4.9",
        ],
    },
    python_requires='>=3.8',
)
