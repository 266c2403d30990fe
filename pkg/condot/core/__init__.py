# Core transport, geodesic and inverse-problem modules
