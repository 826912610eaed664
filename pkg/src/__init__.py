# makes src a package for the ddp command-line tools
