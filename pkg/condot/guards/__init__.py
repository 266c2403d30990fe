# Guards package
