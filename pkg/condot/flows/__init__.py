# Flow matching and particle flows
