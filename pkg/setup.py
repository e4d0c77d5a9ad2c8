from setuptools import setup, find_packages
from pathlib import Path
import toml

config = toml.load('./package_info.toml')
PACKAGE_NAME = config['package-info']['SHORT_PACKAGE_NAME']

if not PACKAGE_NAME.isidentifier():
    raise ValueError("'SHORT_PACKAGE_NAME = %s' is not a valid python identifier." % PACKAGE_NAME)

with open(str(Path(__file__).parent.joinpath(f'src/{PACKAGE_NAME}/VERSION')), 'r') as fvers:
    version = fvers.read().strip()

with open('README.rst') as fd:
    long_description = fd.read()

setupOpts = dict(
    name=PACKAGE_NAME,
    description=config['package-info']['description'],
    long_description=long_description,
    long_description_content_type='text/x-rst',
    license=config['package-info']['license'],
    url=config['package-info']['package-url'],
    author=config['package-info']['author'],
    author_email=config['package-info']['author-email'],
    classifiers=[
        "Programming Language :: Python :: 3",
        "Development Status :: 4 - Beta",
        "Environment :: Console",
        "Intended Audience :: Science/Research",
        "Topic :: Security",
        "Topic :: Software Development :: Testing",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ], )


setup(
    version=version,
    packages=find_packages(where='./src'),
    package_dir={'': 'src'},
    include_package_data=True,
    package_data={PACKAGE_NAME: ['VERSION', 'resources/*.toml', 'vm/programs/*.vm']},
    python_requires='>=3.8',
    entry_points={'console_scripts': [f'taint-grammar = {PACKAGE_NAME}.cli:main']},
    install_requires=['toml', ]+config['package-install']['packages-required'],
    extras_require={'tests': ['pytest']},
    **setupOpts
)
