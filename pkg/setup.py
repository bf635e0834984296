from setuptools import setup
from protoquant.version import __version__

setup(
    name='protoquant',
    packages=['protoquant'],
    install_requires=['numpy', 'torch', 'scipy', 'matplotlib'],
    tests_require=['pytest'],
    entry_points={'console_scripts': ['pcq = protoquant.cli:main']},
    version=__version__,
    license='MIT',
    description='Text-guided prototype quantisation of embeddings with Gumbel-Softmax assignment'
)
