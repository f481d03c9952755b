# AirComp Lab API
