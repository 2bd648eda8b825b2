# Empty file to make tests a package
