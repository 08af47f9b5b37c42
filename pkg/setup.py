from setuptools import setup, find_packages

setup(
    name='anonydiff',
    version='0.1.0',
    packages=find_packages(exclude=['tests']),
    scripts={'anonydiff/config.py'},
    entry_points={'console_scripts': ['anonydiff=anonydiff.cli:main']},
    install_requires=['numpy',
                      'pandas',
                      'scipy',
                      'matplotlib',
                      'torch',
                      'tqdm',
                      'Pillow'],
    extras_require={'test': ['pytest']},
    license='MIT',
    description='anonydiff trains and evaluates a diffusion model that anonymizes or swaps faces on procedurally '
                'rendered synthetic faces, with a tunable degree of anonymization.'
)
