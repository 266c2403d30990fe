# condot package
