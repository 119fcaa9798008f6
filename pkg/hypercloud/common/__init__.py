# Common module
